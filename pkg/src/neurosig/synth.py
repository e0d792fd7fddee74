"""Synthetic cohorts with planted prototype states, learning gains and traits.

Generative model, per subject ``s`` and session ``m``:

* state ``z_t ~ Categorical(pi_s)``, global signal ``gamma_t ~ N(0, global_sigma^2)``
* rest voxels: ``prototype[z_t] + N(0, state_noise_sigma^2) + gamma_t``
* session-1 target voxels: ``baseline_s + N(0, amygdala_noise_sigma^2)``
  plus ``global_coupling * gamma_t * v`` (a cohort-wide coupling pattern)
* session-2 target voxels for a frame in state ``i``:
  ``(1 - g_si) * intrinsic1[src] + g_si * innovation + noise`` plus the
  frame's own global coupling, where ``src`` is the session-1 frame of the
  same state with the closest rest vector and ``intrinsic1`` is session-1
  activity without its global term.

The coupling term is predictable from rest-of-brain input, so a trained
predictor removes it while raw session differences keep it as noise.  The
gain-scaled innovation makes a subject's prediction error grow with its
gains.  Traits are ``W_true @ [g_s ; pi_s] + b_true + noise`` and the binary
label is ``mean(g_s) > median`` over the cohort.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .volume import EXCLUDED, REST, TARGET, Cohort, ROIMask, SubjectRecord, save_cohort

LABEL_NAME = "experienced"


@dataclass
class GeneratorConfig:
    n_subjects: int = 60
    T: int = 18
    dims: tuple[int, int, int] = (8, 8, 8)
    n_target_voxels: int = 12
    k_true: int = 5
    state_noise_sigma: float = 0.5
    amygdala_noise_sigma: float = 0.1
    gain_spread: float = 0.3
    trait_count: int = 4
    trait_noise_sigma: float = 0.3
    seed: int = 0
    gain_center: float = 0.5
    gain_jitter: float = 0.15  # per-state gain sd, as a fraction of gain_spread
    innovation_sigma: float = 1.0
    baseline_sigma: float = 1.0
    subject_baseline_sigma: float = 0.3
    noise_rank: int = 10
    white_noise_fraction: float = 0.0
    global_sigma: float = 0.2
    global_coupling: float = 8.0
    visit_concentration: float = 1.0
    n_alternate_voxels: int = 12
    n_excluded_voxels: int = 0
    n_sessions: int = 2

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        problems = []
        if self.n_subjects < 1:
            problems.append("n_subjects must be >= 1")
        if self.T < 1:
            problems.append("T must be >= 1")
        if self.k_true < 2:
            problems.append("k_true must be >= 2")
        if self.trait_count < 1:
            problems.append("trait_count must be >= 1")
        if self.n_sessions < 2:
            problems.append("n_sessions must be >= 2")
        if len(self.dims) != 3 or min(self.dims) < 1:
            problems.append("dims must be three positive integers")
        sigmas = ("state_noise_sigma", "amygdala_noise_sigma", "gain_spread", "trait_noise_sigma",
                  "gain_jitter", "innovation_sigma", "baseline_sigma", "subject_baseline_sigma", "global_sigma")
        problems += [f"{name} must be >= 0" for name in sigmas if getattr(self, name) < 0]
        if self.noise_rank < 0 or not 0.0 <= self.white_noise_fraction <= 1.0:
            problems.append("noise_rank must be >= 0 and white_noise_fraction in [0, 1]")
        if self.visit_concentration <= 0:
            problems.append("visit_concentration must be > 0")
        n_vox = int(np.prod(self.dims)) if len(self.dims) == 3 else 0
        used = self.n_target_voxels + self.n_alternate_voxels + self.n_excluded_voxels
        if self.n_target_voxels < 1 or used >= n_vox:
            problems.append("voxel budget: need >= 1 target voxel and >= 1 rest voxel")
        if problems:
            raise ValueError("; ".join(problems))
        if self.T < self.k_true:
            warnings.warn(f"T={self.T} < k_true={self.k_true}: some states cannot all be visited", stacklevel=2)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundTruth:
    prototypes: np.ndarray      # (k_true, n_rest)
    gains: np.ndarray           # (S, k_true)
    visits: np.ndarray          # (S, k_true), rows on the simplex
    trait_weights: np.ndarray   # (l, 2 * k_true) acting on [gains ; visits]
    trait_bias: np.ndarray      # (l,)
    states: np.ndarray          # (S, M, T) true state of every frame
    sources: np.ndarray         # (S, T) session-1 source frame of each session-2 frame
    coupling: np.ndarray        # (n_target,) global-signal loading of target voxels
    subject_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        return d


def _region(dims, center, n, taken):
    grid = np.indices(dims).reshape(3, -1).T
    d2 = ((grid - np.asarray(center)) ** 2).sum(axis=1).astype(np.float64)
    d2[taken] = np.inf
    order = np.lexsort((np.arange(d2.size), d2))
    return np.sort(order[:n])


def make_mask(config: GeneratorConfig) -> ROIMask:
    dims = config.dims
    H, W, D = dims
    n = H * W * D
    labels = np.full(n, REST, dtype=np.int8)
    taken = np.zeros(n, dtype=bool)
    target = _region(dims, (0.6 * (H - 1), 0.4 * (W - 1), 0.3 * (D - 1)), config.n_target_voxels, taken)
    labels[target] = TARGET
    taken[target] = True
    alternate = _region(dims, (0.2 * (H - 1), 0.8 * (W - 1), 0.8 * (D - 1)), config.n_alternate_voxels, taken)
    taken[alternate] = True
    if config.n_excluded_voxels:
        # excluded voxels fill the low-index corner away from both regions
        free = np.flatnonzero(~taken)
        labels[free[: config.n_excluded_voxels]] = EXCLUDED
    return ROIMask(dims, labels, alternate=alternate if config.n_alternate_voxels else None)


def _trait_model(config: GeneratorConfig, rng):
    k, l = config.k_true, config.trait_count
    signs = np.where(rng.random(l) < 0.5, -1.0, 1.0)
    w_gain = signs[:, None] * rng.uniform(0.5, 1.5, size=(l, k)) / k
    w_visit = rng.normal(size=(l, k))
    w_visit -= w_visit.mean(axis=1, keepdims=True)

    # scale each block to ~0.5 signal variance using the sampling distributions
    jit = config.gain_jitter * config.gain_spread
    var_gain = w_gain.sum(axis=1) ** 2 * config.gain_spread**2 / 3.0 + (w_gain**2).sum(axis=1) * jit**2
    var_visit = (w_visit**2).sum(axis=1) / k / (k * config.visit_concentration + 1.0)
    w_gain *= np.sqrt(0.5 / np.where(var_gain > 0, var_gain, 0.5))[:, None]
    w_visit *= np.sqrt(0.5 / np.where(var_visit > 0, var_visit, 0.5))[:, None]
    W = np.hstack([w_gain, w_visit])
    mean_feat = np.concatenate([np.full(k, config.gain_center), np.full(k, 1.0 / k)])
    return W, -W @ mean_feat


def _subject(config, protos, coupling, basis, cohort_baseline, mask_idx, rng):
    k, T, M = config.k_true, config.T, config.n_sessions
    target_idx, rest_idx = mask_idx
    n_vox = int(np.prod(config.dims))
    n_a = target_idx.size

    pi = rng.dirichlet(np.full(k, config.visit_concentration))
    a = config.gain_center + config.gain_spread * rng.uniform(-1.0, 1.0)
    gains = np.clip(a + config.gain_jitter * config.gain_spread * rng.normal(size=k), 0.0, 1.0)
    baseline = cohort_baseline + config.subject_baseline_sigma * rng.normal(size=n_a)

    states = np.empty((M, T), dtype=np.int64)
    sessions = []
    intrinsic1 = None
    rest1 = None
    sources = np.zeros(T, dtype=np.int64)
    for m in range(M):
        z = rng.choice(k, size=T, p=pi)
        states[m] = z
        gamma = config.global_sigma * rng.normal(size=T)
        white = np.sqrt(config.white_noise_fraction) * config.state_noise_sigma
        rest = protos[z] + white * rng.normal(size=(T, rest_idx.size)) + gamma[:, None]
        if basis is not None:
            rest += rng.normal(size=(T, basis.shape[0])) @ basis
        if m == 0:
            intrinsic = baseline + config.amygdala_noise_sigma * rng.normal(size=(T, n_a))
            intrinsic1, rest1 = intrinsic, rest
        else:
            intrinsic = np.empty((T, n_a))
            innovation = config.innovation_sigma * rng.normal(size=(T, n_a))
            noise = config.amygdala_noise_sigma * rng.normal(size=(T, n_a))
            for t in range(T):
                same = np.flatnonzero(states[0] == z[t])
                pool = same if same.size else np.arange(T)
                d2 = ((rest1[pool] - rest[t]) ** 2).sum(axis=1)
                src = int(pool[np.argmin(d2)])
                if m == 1:
                    sources[t] = src
                g = gains[z[t]]
                intrinsic[t] = (1.0 - g) * intrinsic1[src] + g * innovation[t] + noise[t]
        frames = np.zeros((T, n_vox))
        frames[:, rest_idx] = rest
        frames[:, target_idx] = intrinsic + config.global_coupling * gamma[:, None] * coupling
        # stored at float32 precision so in-memory and on-disk cohorts agree
        sessions.append(frames.astype(np.float32).astype(np.float64))
    return pi, gains, states, sources, sessions


def generate_cohort(config: GeneratorConfig | None = None) -> tuple[Cohort, GroundTruth]:
    """Deterministic synthetic cohort and its planted ground truth."""
    config = config or GeneratorConfig()
    mask = make_mask(config)
    target_idx, rest_idx = mask.target_index, mask.rest_index

    crng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    protos = crng.normal(size=(config.k_true, rest_idx.size))
    protos -= protos.mean(axis=1, keepdims=True)
    protos /= np.sqrt((protos**2).mean(axis=1, keepdims=True))
    coupling = crng.normal(1.0, 0.3, size=target_idx.size)
    cohort_baseline = config.baseline_sigma * crng.normal(size=target_idx.size)
    basis = None
    if config.noise_rank > 0 and config.white_noise_fraction < 1.0:
        # smooth-noise patterns; each contributes equally to the per-voxel variance
        scale = config.state_noise_sigma * np.sqrt((1.0 - config.white_noise_fraction) / config.noise_rank)
        basis = scale * crng.normal(size=(config.noise_rank, rest_idx.size))
    W, b = _trait_model(config, crng)

    ids = [f"sub{i:03d}" for i in range(config.n_subjects)]
    pis, gains, states, sources, sessions = [], [], [], [], []
    for i in range(config.n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1, i)))
        pi, g, z, src, sess = _subject(config, protos, coupling, basis, cohort_baseline, (target_idx, rest_idx), rng)
        pis.append(pi)
        gains.append(g)
        states.append(z)
        sources.append(src)
        sessions.append(sess)
    pis, gains = np.array(pis), np.array(gains)

    trng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2,)))
    feats = np.hstack([gains, pis])
    traits = feats @ W.T + b + config.trait_noise_sigma * trng.normal(size=(config.n_subjects, config.trait_count))
    mean_gain = gains.mean(axis=1)
    label = mean_gain > np.median(mean_gain)

    names = [f"trait_{j}" for j in range(config.trait_count)]
    subjects = [
        SubjectRecord(ids[i], sessions[i], traits[i], {LABEL_NAME: bool(label[i])}) for i in range(config.n_subjects)
    ]
    cohort = Cohort(subjects, mask, names, [LABEL_NAME], n_sessions=config.n_sessions)
    truth = GroundTruth(protos, gains, pis, W, b, np.array(states), np.array(sources), coupling, ids)
    return cohort, truth


def write_cohort(cohort: Cohort, truth: GroundTruth | None, directory, config: GeneratorConfig | None = None) -> None:
    """Cohort directory format plus ``ground_truth.json``."""
    directory = Path(directory)
    extra = {"generator": asdict(config)} if config is not None else None
    if extra:
        extra["generator"]["dims"] = list(config.dims)
    save_cohort(cohort, directory, extra=extra)
    if truth is not None:
        (directory / "ground_truth.json").write_text(json.dumps(truth.to_dict(), sort_keys=True) + "\n")
