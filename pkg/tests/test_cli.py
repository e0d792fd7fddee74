import json

import pytest

from neurosig.cli import main
from neurosig.evaluation import EvalReport

GEN = {"n_subjects": 12, "T": 8, "dims": [5, 5, 5], "n_target_voxels": 6, "n_alternate_voxels": 6, "k_true": 3}
PIPE = {"k": 3, "kmeans_restarts": 1, "predictor": {"hidden_layers": [8], "max_epochs": 10, "patience": 3},
        "predictor_grid": [{}]}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "gen.json").write_text(json.dumps(GEN))
    assert main(["generate", "--config", str(d / "gen.json"), "--seed", "4", "--out", str(d / "coh")]) == 0
    return d


def test_stage_by_stage(workdir, capsys):
    d = str(workdir)
    assert main(["cluster", "--cohort", f"{d}/coh", "--k", "auto", "--k-max", "4", "--out", f"{d}/c.bin"]) == 0
    assert main(["match", "--cohort", f"{d}/coh", "--out", f"{d}/m.csv"]) == 0
    (workdir / "p.json").write_text(json.dumps({"hidden_layers": [8], "max_epochs": 5}))
    assert main(["train-predictor", "--cohort", f"{d}/coh", "--matches", f"{d}/m.csv", "--mode", "paired",
                 "--config", f"{d}/p.json", "--out", f"{d}/f.nfp"]) == 0
    assert main(["signature", "--cohort", f"{d}/coh", "--centroids", f"{d}/c.bin", "--model", f"{d}/f.nfp",
                 "--matches", f"{d}/m.csv", "--out", f"{d}/s.csv"]) == 0
    assert main(["signature", "--cohort", f"{d}/coh", "--centroids", f"{d}/c.bin", "--variant", "raw_diff",
                 "--out", f"{d}/raw.csv"]) == 0
    assert main(["readout", "--signatures", f"{d}/s.csv", "--traits", f"{d}/coh/traits.csv", "--lambda", "0.1",
                 "--out", f"{d}/r.json"]) == 0
    r = json.loads((workdir / "r.json").read_text())
    assert r["ridge_lambda"] == [0.1] * 5
    assert main(["train-predictor", "--cohort", f"{d}/coh", "--mode", "nofeedback", "--config", f"{d}/p.json",
                 "--out", f"{d}/nf.nfp"]) == 0


def test_evaluate_and_report(workdir, capsys):
    d = str(workdir)
    (workdir / "ev.json").write_text(json.dumps({"pipeline": PIPE}))
    args = ["evaluate", "--cohort", f"{d}/coh", "--config", f"{d}/ev.json", "--repeats", "2",
            "--methods", "full,mean,count_only"]
    assert main([*args, "--seed", "42", "--out", f"{d}/a"]) == 0
    assert main(["--seed", "42", *args, "--out", f"{d}/b"]) == 0  # global flag before the subcommand
    a, b = (workdir / "a" / "report.json").read_bytes(), (workdir / "b" / "report.json").read_bytes()
    assert a == b
    rep = EvalReport.from_json(a.decode())
    assert rep.provenance["config"]["seed"] == 42
    rows = (workdir / "a" / "report.csv").read_text().splitlines()
    assert rows[0].startswith("method,trait_0") and len(rows) == 4 and "±" in rows[1]
    capsys.readouterr()
    assert main(["report", "--report", f"{d}/a/report.json"]) == 0
    assert "full vs mean" in capsys.readouterr().out


def test_exit_codes(workdir, capsys):
    d = str(workdir)
    assert main(["cluster", "--cohort", f"{d}/missing", "--out", f"{d}/x.bin"]) == 2
    (workdir / "bad.json").write_text(json.dumps({"k_true": 1}))
    assert main(["generate", "--config", f"{d}/bad.json", "--out", f"{d}/bad"]) == 2
    (workdir / "huge.json").write_text(json.dumps({"pipeline": {**PIPE, "k": 10_000}}))
    assert main(["evaluate", "--cohort", f"{d}/coh", "--config", f"{d}/huge.json", "--repeats", "2",
                 "--methods", "full", "--out", f"{d}/huge"]) == 3
    assert "incomplete" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
