"""Command-line entry point: ``neurosig <subcommand> [options]``.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .clustering import fit_kmeans, load_centroids, occupancy, save_centroids, scan_k, select_k, assign
from .evaluation import METHODS, EvalReport, PipelineConfig, PipelineError, evaluate, make_splits
from .matching import match_all, read_matches, write_matches
from .predictor import NO_FEEDBACK, PAIRED, NumericalError, PredictorConfig, build_dataset, load_model, mean_loss, save_model, train
from .readout import LAMBDA_GRID, fit_readout, select_lambda
from .signature import VARIANTS, RAW_DIFF, build_raw_diff_signature, build_signature, read_signatures, write_signatures, flatten
from .synth import GeneratorConfig, generate_cohort, write_cohort
from .volume import CohortFormatError, load_cohort

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("neurosig")


def _load_config(args) -> dict:
    if not args.config:
        return {}
    with open(args.config) as fh:
        return json.load(fh)


def _section(cfg: dict, name: str) -> dict:
    """Use ``cfg[name]`` when the file is sectioned, else the whole file."""
    return dict(cfg.get(name, cfg if not ({"generator", "pipeline"} & set(cfg)) else {}))


def _pipeline_config(args) -> PipelineConfig:
    d = _section(_load_config(args), "pipeline")
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "k", None) not in (None, "auto"):
        d["k"] = int(args.k)
    return PipelineConfig.from_dict(d)


def cmd_generate(args) -> int:
    d = _section(_load_config(args), "generator")
    if args.seed is not None:
        d["seed"] = args.seed
    config = GeneratorConfig.from_dict(d)
    cohort, truth = generate_cohort(config)
    write_cohort(cohort, truth, args.out, config)
    print(f"wrote {len(cohort)} subjects to {args.out}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    cohort = load_cohort(args.cohort)
    seed = args.seed or 0
    points = np.vstack([s.rests[0] for s in cohort.subjects])
    if args.k == "auto":
        k = select_k(points, (args.k_min, args.k_max), args.dispersion_max, seed=seed)
        for kk, (_, prof) in sorted(scan_k(points, (args.k_min, args.k_max), seed=seed).items()):
            print(f"k={kk} dispersion={prof.dispersion:.4f}")
    else:
        k = int(args.k)
    C = fit_kmeans(points, k, seed=seed)
    prof = occupancy(assign(points, C), k)
    save_centroids(args.out, C)
    print(f"k={k} inertia={C.inertia:.6g} dispersion={prof.dispersion:.4f} -> {args.out}")
    return EXIT_OK


def cmd_match(args) -> int:
    matches = match_all(load_cohort(args.cohort))
    write_matches(args.out, matches)
    print(f"wrote matches for {len(matches)} subjects to {args.out}")
    return EXIT_OK


def cmd_train_predictor(args) -> int:
    cohort = load_cohort(args.cohort)
    mode = PAIRED if args.mode == "paired" else NO_FEEDBACK
    matches = read_matches(args.matches) if args.matches else (match_all(cohort) if mode == PAIRED else None)
    seed = args.seed or 0
    split = make_splits(cohort, seed=seed, repeats=1, fractions=(0.8, 0.2, 0.0)).splits[0]
    # a flat predictor config, a "predictor" section, or a full pipeline config
    cfg = _load_config(args)
    cfg = cfg.get("pipeline", cfg)
    d = dict(cfg.get("predictor", cfg))
    d.update(seed=seed, input_mode=mode)
    if "hidden_layers" in d:
        d["hidden_layers"] = tuple(d["hidden_layers"])
    config = PredictorConfig(**d)
    tr = build_dataset(cohort, matches, mode, split[0])
    va = build_dataset(cohort, matches, mode, split[1])
    model = train(tr, config, va)
    save_model(args.out, model)
    print(f"epochs={len(model.history)} train={mean_loss(model, tr):.6g} val={mean_loss(model, va):.6g} -> {args.out}")
    return EXIT_OK


def cmd_signature(args) -> int:
    cohort = load_cohort(args.cohort)
    C = load_centroids(args.centroids)
    matches = read_matches(args.matches) if args.matches else match_all(cohort)
    sigs = []
    if args.variant == RAW_DIFF:
        sigs = [build_raw_diff_signature(s, C, matches[s.subject_id]) for s in cohort.subjects]
    else:
        model = load_model(args.model)
        for s in cohort.subjects:
            sig = build_signature(s, C, model, matches.get(s.subject_id), norm=args.norm)
            sig.variant = args.variant
            sigs.append(sig)
    write_signatures(args.out, sigs)
    print(f"wrote {len(sigs)} signatures to {args.out}")
    return EXIT_OK


def _read_target_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "subject_id":
        raise CohortFormatError(f"{path}: header must start with subject_id")
    return rows[0][1:], {r[0]: np.array([float(v) for v in r[1:]]) for r in rows[1:] if r}


def cmd_readout(args) -> int:
    sigs = read_signatures(args.signatures)
    names, table = _read_target_table(args.traits)
    missing = [s.subject_id for s in sigs if s.subject_id not in table]
    if missing:
        raise CohortFormatError(f"no target row for subject(s) {missing[:5]}")
    X = np.array([flatten(s) for s in sigs])
    Y = np.array([table[s.subject_id] for s in sigs])
    if args.lambda_ == "auto":
        ids = np.arange(len(sigs))
        tr, va, _ = make_splits([str(i) for i in ids], seed=args.seed or 0, repeats=1, fractions=(0.8, 0.2, 0.0)).splits[0]
        tr, va = [int(i) for i in tr], [int(i) for i in va]
        lam = select_lambda(X[tr], Y[tr], X[va], Y[va], LAMBDA_GRID)
        print("lambda=" + ",".join(f"{v:g}" for v in lam))
    else:
        lam = float(args.lambda_)
    ro = fit_readout(X, Y, lam, target_names=names)
    ro.save(args.out)
    print(f"wrote readout ({X.shape[1]} features, {Y.shape[1]} targets) to {args.out}")
    return EXIT_OK


def _write_table(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(report.table_rows())


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    config = _pipeline_config(args)
    if args.cohort:
        cohort = load_cohort(args.cohort)
    else:
        gen = _section(cfg, "generator") if "generator" in cfg else {}
        if args.seed is not None:
            gen["seed"] = args.seed
        cohort, _ = generate_cohort(GeneratorConfig.from_dict(gen))
    methods = tuple(args.methods.split(",")) if args.methods else METHODS
    plan = make_splits(cohort, seed=config.seed, repeats=args.repeats)
    report = evaluate(cohort, config, plan, methods=methods, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    _write_table(out / "report.csv", report)
    for row in report.table_rows():
        print("\t".join(row))
    if report.incomplete_repeats:
        print(f"incomplete repeats: {report.incomplete_repeats}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_report(args) -> int:
    report = EvalReport.from_json(Path(args.report).read_text())
    rows = report.table_rows()
    if args.csv:
        _write_table(args.csv, report)
    for row in rows:
        print("\t".join(row))
    for m, c in sorted(report.comparisons.items()):
        print(f"full vs {m}: t={c['total']['t']:.3f} p={c['total']['p']:.4g}")
    return EXIT_OK


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands re-declare the global flags without defaults, so a flag
    # given before or after the subcommand name both take effect
    def d(v):
        return argparse.SUPPRESS if suppress else v

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=d(None))
    g.add_argument("--threads", type=int, default=d(1))
    g.add_argument("--config", default=d(None), help="JSON config file")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    p = argparse.ArgumentParser(prog="neurosig", parents=[_global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic cohort")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("cluster", parents=[common], help="fit prototype states")
    c.add_argument("--cohort", required=True)
    c.add_argument("--k", default="auto")
    c.add_argument("--k-min", type=int, default=2)
    c.add_argument("--k-max", type=int, default=10)
    c.add_argument("--dispersion-max", type=float, default=0.5)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    m = sub.add_parser("match", parents=[common], help="match session-1 frames to session-2 frames")
    m.add_argument("--cohort", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_match)

    t = sub.add_parser("train-predictor", parents=[common], help="train the target-region predictor")
    t.add_argument("--cohort", required=True)
    t.add_argument("--matches", default=None)
    t.add_argument("--mode", choices=("paired", "nofeedback"), default="paired")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_predictor)

    s = sub.add_parser("signature", parents=[common], help="build per-subject signatures")
    s.add_argument("--cohort", required=True)
    s.add_argument("--centroids", required=True)
    s.add_argument("--model", default=None)
    s.add_argument("--matches", default=None)
    s.add_argument("--variant", choices=VARIANTS, default="full")
    s.add_argument("--norm", choices=("sum", "mean"), default="sum")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_signature)

    r = sub.add_parser("readout", parents=[common], help="fit the linear trait readout")
    r.add_argument("--signatures", required=True)
    r.add_argument("--traits", required=True)
    r.add_argument("--lambda", dest="lambda_", default="auto")
    r.add_argument("--out", default="readout.json")
    r.set_defaults(func=cmd_readout)

    e = sub.add_parser("evaluate", parents=[common], help="cross-validated pipeline and baselines")
    e.add_argument("--cohort", default=None, help="cohort directory; a default synthetic cohort if omitted")
    e.add_argument("--k", default="auto")
    e.add_argument("--repeats", type=int, default=5)
    e.add_argument("--methods", default=None, help="comma-separated subset of " + ",".join(METHODS))
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", parents=[common], help="print a saved report")
    rp.add_argument("--report", default="report.json")
    rp.add_argument("--csv", default=None)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PipelineError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CohortFormatError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
