import numpy as np
import pytest

from neurosig.matching import MatchMap, match_all, match_frames, read_matches, write_matches
from neurosig.synth import GeneratorConfig, generate_cohort
from neurosig.volume import Cohort, ROIMask, SubjectRecord


def _subject(sessions, sid="x"):
    n = sessions[0].shape[1]
    mask = ROIMask((1, 1, n), [1] + [0] * (n - 1))
    s = SubjectRecord(sid, sessions, np.zeros(1), {})
    s.attach_mask(mask)
    return s


def test_identical_sessions(rng):
    f = rng.normal(size=(18, 9))
    m = match_frames(_subject([f, f.copy()]))
    assert m.u.tolist() == list(range(18))
    assert np.all(m.distances == 0)


def test_single_frame(rng):
    m = match_frames(_subject([rng.normal(size=(1, 4)), rng.normal(size=(1, 4))]))
    assert m.pairs == [(1, 1)]


def test_ties_smallest_index():
    # column 0 is the target voxel; rest vectors are columns 1-2
    a = np.array([[0.0, 0.0, 0.0], [0.0, 5.0, 5.0]])
    b = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])
    assert match_frames(_subject([a, b])).u.tolist()[0] == 0


def test_missing_session(rng):
    s = _subject([rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])
    s.sessions, s.rests = s.sessions[:1], s.rests[:1]
    with pytest.raises(ValueError):
        match_frames(s)


def test_zero_noise_lands_in_planted_state():
    cohort, truth = generate_cohort(GeneratorConfig(n_subjects=8, state_noise_sigma=0.0, global_sigma=0.0))
    for i, s in enumerate(cohort.subjects):
        m = match_frames(s)
        for t, u in enumerate(m.u):
            z = truth.states[i, 0, t]
            if z in truth.states[i, 1]:
                assert truth.states[i, 1, u] == z and m.distances[t] == 0.0


def test_match_all_brute_force_and_order(small):
    cohort, _ = small
    maps = match_all(cohort)
    assert set(maps) == set(cohort.ids)
    for s in cohort.subjects:
        r1, r2 = s.rests
        for t, u in enumerate(maps[s.subject_id].u):
            d = np.linalg.norm(r1[t] - r2, axis=1)
            assert u == int(np.argmin(d))
            assert (d[u] <= d).all()
            assert maps[s.subject_id].distances[t] == pytest.approx(d[u])
    rev = Cohort(list(reversed(cohort.subjects)), cohort.mask, cohort.trait_names, cohort.label_names)
    again = match_all(rev)
    assert all(np.array_equal(again[k].u, maps[k].u) for k in maps)


def test_brute_force_50_random_subjects(rng):
    for i in range(50):
        T = int(rng.integers(1, 20))
        r = [rng.normal(size=(T, 6)) for _ in range(2)]
        m = match_frames(_subject(r, f"s{i}"))
        for t in range(T):
            d = [np.sum((r[0][t, 1:] - r[1][j, 1:]) ** 2) for j in range(T)]  # skip target voxel
            assert m.u[t] == min(range(T), key=lambda j: (d[j], j))


def test_target_values_ignored(small):
    cohort, _ = small
    s = cohort.subjects[0]
    base = match_frames(s).u
    t = SubjectRecord(s.subject_id, [x.copy() for x in s.sessions], s.traits, s.labels)
    for x in t.sessions:
        x[:, cohort.mask.target_index] = x[::-1][:, cohort.mask.target_index]
    t.attach_mask(cohort.mask)
    assert np.array_equal(match_frames(t).u, base)


def test_csv_round_trip(tmp_path, small):
    cohort, _ = small
    maps = match_all(cohort)
    write_matches(tmp_path / "m.csv", maps)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "subject_id,t,u_t,distance"
    assert lines[1].split(",")[1] == "1"  # frames are numbered from 1
    back = read_matches(tmp_path / "m.csv")
    for k, m in maps.items():
        assert np.array_equal(back[k].u, m.u)
        assert np.allclose(back[k].distances, m.distances)
