"""Cross-validated evaluation of the signature pipeline and its baselines."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from . import _accel
from .clustering import CentroidSet, fit_kmeans, occupancy, assign, select_k
from .matching import match_all
from .predictor import (
    NO_FEEDBACK,
    PAIRED,
    NumericalError,
    PredictorConfig,
    PredictorModel,
    build_dataset,
    eval_baseline_losses,
    get_params,
    mean_loss,
    train,
)
from .readout import LAMBDA_GRID, fit_readout, predict, roc_auc, select_lambda
from .signature import (
    COUNT_ONLY,
    ERROR_ONLY,
    FULL,
    RAW_DIFF,
    build_raw_diff_signature,
    build_signature,
    flatten,
)
from .volume import Cohort

log = logging.getLogger(__name__)

MEAN = "mean"
NO_FEEDBACK_METHOD = "no_feedback"
ALT_CLUSTERING = "alt_clustering"
ALT_ROI = "alt_roi"
BASELINES = (MEAN, RAW_DIFF, COUNT_ONLY, ERROR_ONLY, NO_FEEDBACK_METHOD, ALT_CLUSTERING, ALT_ROI)
METHODS = (FULL, *BASELINES)

REST_ONLY, FULL_BRAIN = "rest", "full_brain"
TARGET_ROI, ALTERNATE_ROI = "target", "alternate"


class PipelineError(RuntimeError):
    pass


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    repeats: int
    fractions: tuple[float, float, float]
    splits: tuple[tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]], ...]

    def __iter__(self):
        return iter(self.splits)

    def __len__(self):
        return len(self.splits)


def split_sizes(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    return n - n_val - n_test, n_val, n_test


def make_splits(cohort_or_ids, seed: int = 0, repeats: int = 5, fractions=(0.6, 0.2, 0.2)) -> SplitPlan:
    """Seeded subject-level train/validation/test partitions, one per repeat.

    Validation and test sizes are rounded; training takes the remainder.
    """
    ids = sorted(cohort_or_ids.ids if isinstance(cohort_or_ids, Cohort) else cohort_or_ids)
    if len(ids) < 5:
        raise ValueError(f"cohort too small for splitting ({len(ids)} subjects, need >= 5)")
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions[:2]) <= 0 or fractions[2] < 0:
        raise ValueError("fractions must sum to 1 with positive train and validation parts")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    n_train, n_val, _ = split_sizes(len(ids), fractions)
    splits = []
    for r in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
        perm = [ids[i] for i in rng.permutation(len(ids))]
        splits.append(
            (
                tuple(sorted(perm[:n_train])),
                tuple(sorted(perm[n_train:n_train + n_val])),
                tuple(sorted(perm[n_train + n_val:])),
            )
        )
    return SplitPlan(seed, repeats, tuple(fractions), tuple(splits))


# -- configuration ------------------------------------------------------------


@dataclass
class PipelineConfig:
    k: int | None = None
    k_range: tuple[int, int] = (2, 8)
    dispersion_max: float = 0.5
    kmeans_restarts: int = 5
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    # candidate overrides tried on the validation split; best validation loss wins
    predictor_grid: tuple[dict, ...] = ({"activation": "relu"}, {"activation": "linear"})
    ridge_lambda: float | str = "auto"
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    lambda_rule: str = "one_se"
    clustering_mode: str = REST_ONLY
    roi_mode: str = TARGET_ROI
    error_norm: str = "sum"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "predictor" in d and isinstance(d["predictor"], dict):
            d["predictor"] = PredictorConfig(**d["predictor"])
        for key in ("k_range", "lambda_grid"):
            if key in d:
                d[key] = tuple(d[key])
        if "predictor_grid" in d:
            d["predictor_grid"] = tuple(dict(g) for g in d["predictor_grid"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictor"]["hidden_layers"] = list(self.predictor.hidden_layers)
        d["k_range"] = list(self.k_range)
        d["lambda_grid"] = list(self.lambda_grid)
        d["predictor_grid"] = [dict(g) for g in self.predictor_grid]
        return d


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def cohort_hash(cohort: Cohort) -> str:
    h = hashlib.sha256()
    h.update(cohort.mask.labels.tobytes())
    for s in cohort.subjects:
        h.update(s.subject_id.encode())
        for frames in s.sessions:
            h.update(np.ascontiguousarray(frames, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(s.traits, dtype=np.float64).tobytes())
        h.update(json.dumps(s.labels, sort_keys=True).encode())
    return h.hexdigest()


# -- stages -------------------------------------------------------------------


def _seed(config: PipelineConfig, repeat: int, stage: int) -> int:
    return int(np.random.SeedSequence(config.seed, spawn_key=(repeat, stage)).generate_state(1)[0])


def fit_prototypes(cohort: Cohort, train_ids, config: PipelineConfig, seed: int, space: str = "rest", k: int | None = None):
    """Centroids from session-1 vectors of the training subjects."""
    pick = (lambda s: s.rests[0]) if space == "rest" else (lambda s: s.sessions[0])
    X = np.vstack([pick(cohort[i]) for i in train_ids])
    k = k if k is not None else config.k
    if k is None:
        k = select_k(X, config.k_range, config.dispersion_max, seed=seed, n_restarts=config.kmeans_restarts)
    C = fit_kmeans(X, k, seed=seed, n_restarts=config.kmeans_restarts)
    prof = occupancy([assign(X, C)], C.k)
    return C, prof


def train_predictor(cohort, matches, train_ids, val_ids, config: PipelineConfig, mode: str, seed: int) -> PredictorModel:
    """Train every candidate of the predictor grid and keep the best on validation."""
    dtr = build_dataset(cohort, matches, mode, train_ids)
    dva = build_dataset(cohort, matches, mode, val_ids)
    grid = config.predictor_grid or ({},)
    best, best_val = None, math.inf
    for override in grid:
        pc = replace(config.predictor, **override, seed=seed, input_mode=mode)
        model = train(dtr, pc, dva)
        val = mean_loss(model, dva)
        if val < best_val:
            best, best_val = model, val
    return best


def _features(sigs, ids, variant):
    return np.array([flatten(sigs[i], variant) for i in ids])


def _targets(cohort: Cohort, ids):
    return np.hstack([cohort.trait_matrix(ids), cohort.label_matrix(ids)])


def _score(cohort, pred, ids):
    Y = _targets(cohort, ids)
    n_t = len(cohort.trait_names)
    mse = np.mean((pred[:, :n_t] - Y[:, :n_t]) ** 2, axis=0)
    aucs = {}
    for j, name in enumerate(cohort.label_names):
        y = Y[:, n_t + j] > 0.5
        aucs[name] = roc_auc(pred[:, n_t + j], y) if 0 < y.sum() < y.size else float("nan")
    return mse, aucs


def _fit_and_score(cohort, X_by_id, split, config: PipelineConfig):
    train_ids, val_ids, test_ids = split
    Xtr = np.array([X_by_id[i] for i in train_ids])
    Xva = np.array([X_by_id[i] for i in val_ids])
    Xte = np.array([X_by_id[i] for i in test_ids])
    Ytr, Yva = _targets(cohort, train_ids), _targets(cohort, val_ids)
    if config.ridge_lambda == "auto":
        lam = select_lambda(Xtr, Ytr, Xva, Yva, config.lambda_grid, config.lambda_rule)
    else:
        lam = float(config.ridge_lambda)
    ro = fit_readout(Xtr, Ytr, lam, target_names=[*cohort.trait_names, *cohort.label_names])
    pred = predict(ro, Xte)
    mse, aucs = _score(cohort, pred, test_ids)
    return ro, pred, mse, aucs


def _stage_artifacts(cohort: Cohort, split, config: PipelineConfig, repeat: int, space: str, want_nf: bool):
    """Clustering, matching, predictor(s) and signatures for one ROI assignment."""
    train_ids, val_ids, test_ids = split
    C, prof = fit_prototypes(cohort, train_ids, config, _seed(config, repeat, 1), space="rest")
    matches = match_all(cohort)
    model = train_predictor(cohort, matches, train_ids, val_ids, config, PAIRED, _seed(config, repeat, 2))
    out = {"C": C, "occupancy": prof, "matches": matches, "model": model}
    sigs = {}
    for s in cohort.subjects:
        sigs[s.subject_id] = build_signature(s, C, model, matches[s.subject_id], norm=config.error_norm)
    out["sigs"] = sigs
    if want_nf:
        out["nf_model"] = train_predictor(cohort, matches, train_ids, val_ids, config, NO_FEEDBACK, _seed(config, repeat, 3))
    return out


def run_repeat(cohort: Cohort, split, config: PipelineConfig, repeat: int, methods=METHODS) -> dict:
    """Every requested method on one split; returns a JSON-ready record."""
    train_ids, val_ids, test_ids = split
    methods = list(methods)
    record = {"repeat": repeat, "n_train": len(train_ids), "n_val": len(val_ids), "n_test": len(test_ids), "methods": {}}

    base_cohort = cohort
    if config.roi_mode == ALTERNATE_ROI:
        base_cohort = cohort.with_mask(cohort.mask.swap_alternate())
    need_main = any(m != MEAN and m != ALT_ROI for m in methods)
    need_main = need_main or (ALT_ROI in methods and config.roi_mode == ALTERNATE_ROI)

    def put(name, feats_by_id, artifacts):
        ro, pred, mse, aucs = _fit_and_score(cohort, feats_by_id, split, config)
        record["methods"][name] = {
            "mse": mse.tolist(),
            "auc": aucs,
            "lambda": ro.ridge_lambda.tolist(),
            "predictions": {sid: p.tolist() for sid, p in zip(test_ids, pred)},
            "hashes": {**artifacts, "readout": _digest(ro.G, ro.b, ro.feature_means, ro.feature_stds)},
        }

    if MEAN in methods:
        Ytr = _targets(cohort, train_ids)
        pred = np.repeat(Ytr.mean(axis=0, keepdims=True), len(test_ids), axis=0)
        mse, aucs = _score(cohort, pred, test_ids)
        record["methods"][MEAN] = {
            "mse": mse.tolist(),
            "auc": aucs,
            "predictions": {sid: p.tolist() for sid, p in zip(test_ids, pred)},
            "hashes": {},
        }

    if need_main:
        art = _stage_artifacts(base_cohort, split, config, repeat, config.clustering_mode,
                               want_nf=NO_FEEDBACK_METHOD in methods)
        C, model, sigs, matches = art["C"], art["model"], art["sigs"], art["matches"]
        hashes = {"centroids": _digest(C.centroids), "model": _digest(get_params(model))}
        record["k"] = C.k
        record["occupancy"] = art["occupancy"].ratios.tolist()
        record["predictor"] = {
            "activation": model.config.activation,
            "epochs": len(model.history),
            "val_loss": min(h["val"] for h in model.history) if model.history else None,
            "test_loss": mean_loss(model, build_dataset(base_cohort, matches, PAIRED, test_ids)),
            **eval_baseline_losses(base_cohort, matches, train_ids, test_ids),
        }
        if config.clustering_mode == FULL_BRAIN:
            C_main, _ = fit_prototypes(base_cohort, train_ids, config, _seed(config, repeat, 1), space="full", k=C.k)
            sigs = {s.subject_id: build_signature(s, C_main, model, matches[s.subject_id], config.error_norm, "full")
                    for s in base_cohort.subjects}
            hashes["centroids"] = _digest(C_main.centroids)
        main_method = FULL if config.roi_mode == TARGET_ROI else ALT_ROI
        if FULL in methods or main_method in methods:
            put(main_method, {i: flatten(sigs[i], FULL) for i in cohort.ids}, hashes)
        if COUNT_ONLY in methods:
            put(COUNT_ONLY, {i: flatten(sigs[i], COUNT_ONLY) for i in cohort.ids}, hashes)
        if ERROR_ONLY in methods:
            put(ERROR_ONLY, {i: flatten(sigs[i], ERROR_ONLY) for i in cohort.ids}, hashes)
        if RAW_DIFF in methods:
            raw = {s.subject_id: build_raw_diff_signature(s, C, matches[s.subject_id]) for s in base_cohort.subjects}
            put(RAW_DIFF, {i: flatten(raw[i], RAW_DIFF) for i in cohort.ids}, {"centroids": hashes["centroids"]})
        if NO_FEEDBACK_METHOD in methods:
            nf = art["nf_model"]
            nf_sigs = {s.subject_id: build_signature(s, C, nf, None, config.error_norm) for s in base_cohort.subjects}
            put(NO_FEEDBACK_METHOD, {i: flatten(nf_sigs[i], FULL) for i in cohort.ids},
                {"centroids": hashes["centroids"], "model": _digest(get_params(nf))})
        if ALT_CLUSTERING in methods:
            C_full, _ = fit_prototypes(base_cohort, train_ids, config, _seed(config, repeat, 1), space="full", k=C.k)
            alt = {s.subject_id: build_signature(s, C_full, model, matches[s.subject_id], config.error_norm, "full")
                   for s in base_cohort.subjects}
            put(ALT_CLUSTERING, {i: flatten(alt[i], FULL) for i in cohort.ids},
                {"centroids": _digest(C_full.centroids), "model": hashes["model"]})

    if ALT_ROI in methods and config.roi_mode == TARGET_ROI:
        if cohort.mask.alternate is None:
            raise PipelineError("alt_roi needs a cohort whose mask defines an alternate region")
        alt_cohort = cohort.with_mask(cohort.mask.swap_alternate())
        art = _stage_artifacts(alt_cohort, split, config, repeat, config.clustering_mode, want_nf=False)
        put(ALT_ROI, {i: flatten(art["sigs"][i], FULL) for i in cohort.ids},
            {"centroids": _digest(art["C"].centroids), "model": _digest(get_params(art["model"]))})
    return record


def _run_repeat_safe(args):
    cohort, split, config, repeat, methods = args
    with threadpool_limits(limits=1):
        try:
            return run_repeat(cohort, split, config, repeat, methods)
        except (NumericalError, ValueError, PipelineError, np.linalg.LinAlgError) as exc:
            log.error("repeat %d failed: %s", repeat, exc)
            return {"repeat": repeat, "failed": True, "error": f"{type(exc).__name__}: {exc}"}


# -- statistics ---------------------------------------------------------------


def corrected_t_test(errors_a, errors_b, n_train: int, n_test: int) -> tuple[float, float]:
    """Paired t-test over repeats with the resampling variance correction.

    ``t = mean(d) / sqrt((1/J + n_test/n_train) * var(d))`` with ``J - 1``
    degrees of freedom.  Zero variance gives ``(0, 1)`` for zero mean and
    ``(+-inf, 0)`` otherwise.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("error vectors must be 1-D and of equal length")
    J = a.size
    if J < 2:
        raise ValueError("need at least two repeats")
    d = a - b
    mean = d.mean()
    var = d.var(ddof=1)
    if var == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt((1.0 / J + n_test / n_train) * var)
    p = 2.0 * stats.t.sf(abs(t), J - 1)
    return float(t), float(p)


def _mean_sd(values):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"mean": None, "sd": None}
    return {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0}


@dataclass
class EvalReport:
    trait_names: list[str]
    label_names: list[str]
    methods: dict
    comparisons: dict
    predictor: dict
    provenance: dict
    repeats: list[dict]
    incomplete_repeats: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def mse(self, method: str, trait: str | None = None) -> float:
        m = self.methods[method]
        return m["mse_total"]["mean"] if trait is None else m["mse"][trait]["mean"]

    def table_rows(self) -> list[list[str]]:
        header = ["method", *self.trait_names, "total", *[f"auc_{n}" for n in self.label_names]]
        rows = [header]
        for name, m in self.methods.items():
            cells = [name]
            for t in self.trait_names:
                cells.append(_pm(m["mse"][t]))
            cells.append(_pm(m["mse_total"]))
            for n in self.label_names:
                cells.append(_pm(m["auc"][n]))
            rows.append(cells)
        return rows


def _pm(cell):
    if cell["mean"] is None:
        return "n/a"
    return f"{cell['mean']:.4f}±{cell['sd']:.4f}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def summarize(cohort: Cohort, plan: SplitPlan, config: PipelineConfig, records: list[dict], methods) -> EvalReport:
    done = [r for r in records if not r.get("failed")]
    incomplete = [r["repeat"] for r in records if r.get("failed")]
    names = cohort.trait_names
    summary = {}
    for m in methods:
        rows = [r["methods"][m] for r in done if m in r["methods"]]
        if not rows:
            continue
        mse = np.array([row["mse"] for row in rows])
        summary[m] = {
            "mse": {t: _mean_sd(mse[:, j]) for j, t in enumerate(names)},
            "mse_total": _mean_sd(mse.sum(axis=1)),
            "auc": {n: _mean_sd([row["auc"][n] for row in rows]) for n in cohort.label_names},
        }
    comparisons = {}
    if FULL in summary and len(done) >= 2:
        n_train = done[0]["n_train"]
        n_test = done[0]["n_test"]
        full = np.array([r["methods"][FULL]["mse"] for r in done])
        for m in summary:
            if m == FULL:
                continue
            other = np.array([r["methods"][m]["mse"] for r in done])
            t, p = corrected_t_test(full.sum(axis=1), other.sum(axis=1), n_train, n_test)
            per = {}
            for j, name in enumerate(names):
                tj, pj = corrected_t_test(full[:, j], other[:, j], n_train, n_test)
                per[name] = {"t": tj, "p": pj}
            comparisons[m] = {"total": {"t": t, "p": p}, "traits": per}
    pred = {}
    keys = ("test_loss", "copy_A1", "mean_prediction")
    pr = [r["predictor"] for r in done if "predictor" in r]
    if pr:
        pred = {k: _mean_sd([p[k] for p in pr]) for k in keys}
    provenance = {
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "cohort_hash": cohort_hash(cohort),
        "plan": {"seed": plan.seed, "repeats": plan.repeats, "fractions": list(plan.fractions),
                 "splits": [[list(a), list(b), list(c)] for a, b, c in plan.splits]},
        "backend": _accel.backend(),
    }
    return EvalReport(list(names), list(cohort.label_names), summary, comparisons, pred, provenance,
                      sorted(records, key=lambda r: r["repeat"]), incomplete)


def evaluate(cohort: Cohort, config: PipelineConfig | None = None, plan: SplitPlan | None = None,
             methods=METHODS, threads: int = 1) -> EvalReport:
    """Run all requested methods on every repeat of the plan and summarize."""
    config = config or PipelineConfig()
    plan = plan or make_splits(cohort, seed=config.seed)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}")
    jobs = [(cohort, split, config, r, tuple(methods)) for r, split in enumerate(plan)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            records = list(pool.map(_run_repeat_safe, jobs))
    else:
        records = [_run_repeat_safe(j) for j in jobs]
    return summarize(cohort, plan, config, records, methods)


def run_pipeline(cohort: Cohort, config: PipelineConfig | None = None, plan: SplitPlan | None = None, threads: int = 1) -> EvalReport:
    return evaluate(cohort, config, plan, methods=(FULL,), threads=threads)


def run_baseline(name: str, cohort: Cohort, plan: SplitPlan | None = None, config: PipelineConfig | None = None,
                 threads: int = 1) -> EvalReport:
    if name not in BASELINES:
        raise ValueError(f"unknown baseline {name!r}; expected one of {BASELINES}")
    return evaluate(cohort, config, plan, methods=(name,), threads=threads)
