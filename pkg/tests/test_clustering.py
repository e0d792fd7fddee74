import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neurosig.clustering import (
    CentroidSet,
    assign,
    fit_kmeans,
    load_centroids,
    occupancy,
    save_centroids,
    select_k,
)
from neurosig.synth import GeneratorConfig, generate_cohort


def test_k_equal_distinct_points(rng):
    P = rng.normal(size=(6, 4))
    C = fit_kmeans(P, 6, seed=3)
    assert C.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(map(tuple, C.centroids)) == sorted(map(tuple, P))


def test_k1_is_mean(rng):
    P = rng.normal(size=(50, 3))
    C = fit_kmeans(P, 1)
    assert np.allclose(C.centroids[0], P.mean(axis=0))


def test_planted_prototypes_recovered():
    cohort, truth = generate_cohort(GeneratorConfig(n_subjects=4, T=10, k_true=4, state_noise_sigma=0.0,
                                                    global_sigma=0.0, seed=5))
    P = np.vstack([s.rests[0] for s in cohort.subjects])  # 40 points
    z = truth.states[:, 0].ravel()
    lab = assign(P, fit_kmeans(P, len(np.unique(z)), seed=0))
    # best label matching: every planted state maps to exactly one cluster and vice versa
    assert all(len(np.unique(lab[z == s])) == 1 for s in np.unique(z))
    assert len(np.unique(lab)) == len(np.unique(z))


def test_errors():
    with pytest.raises(ValueError, match="distinct"):
        fit_kmeans(np.ones((5, 2)), 2)
    with pytest.raises(ValueError):
        fit_kmeans(np.zeros((0, 2)), 1)


def test_inertia_non_increasing_every_iteration(rng):
    for trial in range(20):
        P = rng.normal(size=(120, 5)) + rng.integers(0, 4, size=(120, 1))
        C = fit_kmeans(P, 1 + trial % 7, seed=trial, n_restarts=2)
        h = np.array(C.history)
        assert (np.diff(h) <= 1e-9 * max(1.0, h[0])).all()


def test_deterministic(rng):
    P = rng.normal(size=(80, 4))
    a, b = fit_kmeans(P, 4, seed=9), fit_kmeans(P, 4, seed=9)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_empty_cluster_reseeded():
    # two far-apart blobs and a third centre that starts stranded between them
    from neurosig.clustering import _lloyd

    P = np.array([[0.0], [0.1], [10.0], [10.1]])
    centers, labels, history = _lloyd(P, np.array([[0.05], [10.05], [100.0]]), 50, 1e-9)
    assert len(np.unique(labels)) == 3
    assert history[-1] < history[0]


def test_assign_exact_and_tie():
    C = CentroidSet(np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0], [9.0, 9.0]]))
    assert assign(C.centroids[3], C) == 3
    assert assign(np.array([1.0, 0.0]), C) == 0
    with pytest.raises(ValueError):
        assign(np.zeros(3), C)


def test_assign_matches_exhaustive_scan(rng):
    C = CentroidSet(rng.normal(size=(7, 10)))
    V = rng.normal(size=(1000, 10))
    brute = np.array([int(np.argmin([np.sum((v - c) ** 2) for c in C.centroids])) for v in V])
    assert np.array_equal(assign(V, C), brute)


def test_occupancy_examples(rng):
    prof = occupancy([np.repeat(np.arange(5), 4)], 5)
    assert np.allclose(prof.ratios, 0.2) and prof.dispersion == 0.0
    prof = occupancy([[0, 0, 0], [0, 0, 0]], 2)
    assert prof.ratios.tolist() == [1.0, 0.0] and prof.dispersion == pytest.approx(1.0)
    A = rng.integers(0, 6, size=(9, 18))
    prof = occupancy(list(A), 6)
    hist = np.array([np.sum(A == i) for i in range(6)]) / (18 * 9)
    assert np.allclose(prof.ratios, hist)
    assert prof.ratios.sum() == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        occupancy([[0, 6]], 6)


def test_select_k_on_planted_cohort():
    cohort, _ = generate_cohort(GeneratorConfig(state_noise_sigma=0.0, global_sigma=0.0))
    P = np.vstack([s.rests[0] for s in cohort.subjects])
    k = select_k(P, (2, 10), 0.5, seed=0)
    assert 5 <= k <= 10
    C = fit_kmeans(P, k, seed=0)
    assert occupancy([assign(P, C)], k).dispersion <= 0.5


def test_select_k_degenerate_and_unbounded(rng):
    with pytest.warns(UserWarning):
        assert select_k(np.ones((10, 3)), (2, 3)) == 2
    P = rng.normal(size=(60, 3))
    assert select_k(P, (2, 6), np.inf, n_restarts=1) == 6
    with pytest.raises(ValueError):
        select_k(P, (5, 4))


def test_target_values_do_not_touch_clustering(small):
    cohort, _ = small
    P = np.vstack([s.rests[0] for s in cohort.subjects])
    full = np.vstack([s.sessions[0] for s in cohort.subjects]).copy()
    full[:, cohort.mask.target_index] = np.random.default_rng(0).permutation(full[:, cohort.mask.target_index])
    assert np.array_equal(full[:, cohort.mask.rest_index], P)
    assert fit_kmeans(P, 3, seed=1).centroids.tobytes() == fit_kmeans(full[:, cohort.mask.rest_index], 3, seed=1).centroids.tobytes()


def test_centroid_file_round_trip(tmp_path, rng):
    C = CentroidSet(rng.normal(size=(3, 11)).astype(np.float32).astype(np.float64))
    save_centroids(tmp_path / "c.bin", C)
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"NFKC"
    assert np.array_equal(load_centroids(tmp_path / "c.bin").centroids, C.centroids)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-100, 100, allow_nan=False)), st.integers(1, 4))
def test_property_assign_is_nearest(P, k):
    if np.unique(P, axis=0).shape[0] < k:
        return
    C = fit_kmeans(P, k, n_restarts=1)
    d = ((P[:, None, :] - C.centroids[None]) ** 2).sum(axis=2)
    lab = assign(P, C)
    assert np.allclose(d[np.arange(12), lab], d.min(axis=1))
    assert all(assign(c, C) == i for i, c in enumerate(C.centroids)
               if np.unique(C.centroids, axis=0).shape[0] == k)
