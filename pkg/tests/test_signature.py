import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurosig.clustering import CentroidSet, fit_kmeans
from neurosig.matching import match_all, match_frames
from neurosig.predictor import NO_FEEDBACK, PredictorConfig, forward, init_model
from neurosig.signature import (
    COUNT_ONLY,
    ERROR_ONLY,
    FULL,
    RAW_DIFF,
    SignatureMatrix,
    aggregate,
    build_raw_diff_signature,
    build_signature,
    flatten,
    frame_errors,
    read_signatures,
    unflatten,
    write_signatures,
)
from neurosig.volume import SubjectRecord


@pytest.fixture(scope="module")
def parts(small):
    cohort, _ = small
    P = np.vstack([s.rests[0] for s in cohort.subjects])
    C = fit_kmeans(P, 3, seed=0)
    n_r, n_a = cohort.n_rest, cohort.n_target
    model = init_model(PredictorConfig(hidden_layers=(6,), seed=2), 2 * n_r + n_a, n_a)
    return cohort, C, model, match_all(cohort)


def test_toy_arithmetic():
    sig = aggregate("x", [0, 0, 1], [0.1, 0.3, 0.5], 2)
    assert sig.counts.tolist() == [2, 1]
    assert np.allclose(sig.errors, [0.2, 0.5])


def test_all_frames_in_one_cluster():
    sig = aggregate("x", [2] * 18, np.linspace(0, 1, 18), 3)
    assert sig.rows[:2] == [(0, 0.0), (0, 0.0)]
    assert sig.rows[2][0] == 18 and sig.rows[2][1] == pytest.approx(0.5)


def test_perfect_predictor_zero_errors(parts):
    cohort, C, _, matches = parts
    s = cohort.subjects[0]
    n_r, n_a = cohort.n_rest, cohort.n_target
    # a zero-weight model predicts zeros; zeroing the session-2 targets makes it exact
    lin = init_model(PredictorConfig(hidden_layers=(), activation="linear"), 2 * n_r + n_a, n_a)
    lin.weights[0][...] = 0.0
    twin = SubjectRecord(s.subject_id, [s.sessions[0], s.sessions[1].copy()], s.traits, s.labels)
    twin.sessions[1][:, cohort.mask.target_index] = 0.0  # model outputs zeros, targets are zeros
    twin.attach_mask(cohort.mask)
    sig = build_signature(twin, C, lin, match_frames(twin))
    assert not sig.errors.any() and sig.counts.sum() == cohort.n_frames


def test_errors_match_recomputation(parts):
    cohort, C, model, matches = parts
    for s in cohort.subjects[:4]:
        sig = build_signature(s, C, model, matches[s.subject_id])
        u = matches[s.subject_id].u
        lab = [int(np.argmin(((C.centroids - r) ** 2).sum(axis=1))) for r in s.rests[0]]
        errs = [float(np.sum((forward(model, np.concatenate([s.rests[0][t], s.targets[0][t], s.rests[1][u[t]]]))
                              - s.targets[1][u[t]]) ** 2)) for t in range(s.n_frames)]
        for i in range(C.k):
            members = [e for e, l in zip(errs, lab) if l == i]
            assert sig.counts[i] == len(members)
            assert sig.errors[i] == pytest.approx(np.mean(members) if members else 0.0)
        mean_norm = frame_errors(s, model, matches[s.subject_id], norm="mean")
        assert np.allclose(mean_norm * cohort.n_target, errs)


def test_raw_diff(parts):
    cohort, C, model, matches = parts
    for s in cohort.subjects[:4]:
        rd = build_raw_diff_signature(s, C, matches[s.subject_id])
        full = build_signature(s, C, model, matches[s.subject_id])
        assert np.array_equal(rd.counts, full.counts) and rd.variant == RAW_DIFF
        u = matches[s.subject_id].u
        d = np.sum((s.targets[0] - s.targets[1][u]) ** 2, axis=1)
        lab = [int(np.argmin(((C.centroids - r) ** 2).sum(axis=1))) for r in s.rests[0]]
        for i in range(C.k):
            sel = [d[t] for t in range(len(d)) if lab[t] == i]
            assert rd.errors[i] == pytest.approx(np.mean(sel) if sel else 0.0)
    s = cohort.subjects[0]
    same = SubjectRecord("x", [s.sessions[0], s.sessions[0].copy()], s.traits, s.labels)
    same.attach_mask(cohort.mask)
    assert not build_raw_diff_signature(same, C, match_frames(same)).errors.any()


def test_raw_diff_unit_vector():
    from neurosig.volume import ROIMask

    mask = ROIMask((1, 1, 4), [1, 1, 0, 0])
    s = SubjectRecord("x", [np.array([[1.0, 0.0, 3.0, 4.0]]), np.array([[0.0, 0.0, 3.0, 4.0]])], np.zeros(1), {})
    s.attach_mask(mask)
    sig = build_raw_diff_signature(s, CentroidSet(np.array([[3.0, 4.0]])), match_frames(s))
    assert sig.rows == [(1, 1.0)]


def test_no_feedback_scores_own_frames(parts):
    cohort, C, _, _ = parts
    nf = init_model(PredictorConfig(hidden_layers=(4,), input_mode=NO_FEEDBACK), cohort.n_rest, cohort.n_target)
    s = cohort.subjects[1]
    e = frame_errors(s, nf, None)
    assert np.allclose(e, np.sum((forward(nf, s.rests[0]) - s.targets[0]) ** 2, axis=1))


def test_unseen_subject_uses_frozen_artifacts(parts):
    cohort, C, model, matches = parts
    s = cohort.subjects[5]
    alone = build_signature(s, C, model, match_frames(s))
    within = build_signature(s, C, model, matches[s.subject_id])
    assert np.array_equal(alone.counts, within.counts) and np.array_equal(alone.errors, within.errors)


def test_length_mismatch(parts):
    cohort, _, model, matches = parts
    s = cohort.subjects[0]
    with pytest.raises(ValueError):
        build_signature(s, CentroidSet(np.zeros((2, 3))), model, matches[s.subject_id])


def test_flatten_layouts():
    sig = SignatureMatrix("x", np.array([3, 15]), np.array([0.5, 0.2]))
    assert flatten(sig, FULL).tolist() == [3, 0.5, 15, 0.2]
    assert flatten(sig, COUNT_ONLY).tolist() == [3, 15]
    assert flatten(sig, ERROR_ONLY).tolist() == [0.5, 0.2]
    # concatenating the partial variants reproduces the full features
    full = flatten(sig, FULL)
    assert sorted(full) == sorted(np.concatenate([flatten(sig, COUNT_ONLY), flatten(sig, ERROR_ONLY)]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.floats(0, 1e6, allow_nan=False)), min_size=1, max_size=12))
def test_flatten_unflatten_round_trip(rows):
    counts = np.array([c for c, _ in rows])
    errors = np.array([e if c else 0.0 for c, e in rows])
    sig = SignatureMatrix("x", counts, errors)
    back = unflatten(flatten(sig), FULL, "x")
    assert np.array_equal(back.counts, counts) and np.array_equal(back.errors, errors)


def test_csv_round_trip(tmp_path, parts):
    cohort, C, model, matches = parts
    sigs = [build_signature(s, C, model, matches[s.subject_id]) for s in cohort.subjects]
    write_signatures(tmp_path / "s.csv", sigs)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "subject_id,variant,count_0,err_0,count_1,err_1,count_2,err_2"
    back = read_signatures(tmp_path / "s.csv")
    for a, b in zip(sigs, back):
        assert a.subject_id == b.subject_id
        assert np.array_equal(a.counts, b.counts) and np.array_equal(a.errors, b.errors)
        assert a.counts.sum() == cohort.n_frames
