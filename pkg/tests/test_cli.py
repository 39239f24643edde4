import csv
import io
import json

import pytest

from deferral.cli import main
from deferral.data import CsvSchema, load_dataset_csv
from deferral.experiments import aggregate_rows, summarize
from deferral.verify import Check, check_gradients, run_verification_suite


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


SMALL = dict(n_train=200, n_test=200, epochs=3, coverage_grid=[0.0, 0.3, 0.7, 1.0])


def test_run_writes_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", kind="coverage_study", trials=2, **SMALL)
    assert main(["run", cfg, "--output-dir", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    assert {p.name for p in out.iterdir()} == {"results.json", "curves.csv", "run.log"}
    assert (out / "curves.csv").read_text().splitlines()[0] == "method,task,coverage,metric,value,seed,trial"


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json", kind="coverage_study", trials=2, **SMALL)
    main(["run", cfg, "--output-dir", str(tmp_path / "a")])
    main(["run", cfg, "--output-dir", str(tmp_path / "b")])
    for name in ("results.json", "curves.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_worker_pool_matches_serial(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json", kind="coverage_study", trials=3, **SMALL)
    main(["run", cfg, "--output-dir", str(tmp_path / "serial")])
    monkeypatch.setenv("DEFERRAL_WORKERS", "2")
    main(["run", cfg, "--output-dir", str(tmp_path / "pool")])
    assert (tmp_path / "serial" / "results.json").read_bytes() == (tmp_path / "pool" / "results.json").read_bytes()


def test_aggregates_reproducible_from_curves(tmp_path):
    cfg = write_config(tmp_path / "c.json", kind="coverage_study", trials=3, **SMALL)
    main(["run", cfg, "--output-dir", str(tmp_path / "o")])
    with open(tmp_path / "o" / "curves.csv") as fh:
        rows = [[r["method"], r["task"], float(r["coverage"]), r["metric"], float(r["value"]), int(r["seed"]),
                 int(r["trial"])] for r in csv.DictReader(fh)]
    saved = json.loads((tmp_path / "o" / "results.json").read_text())["summary"]["aggregates"]
    assert json.loads(json.dumps(aggregate_rows(rows))) == saved


def test_table1_summary_from_curves(tmp_path):
    cfg = write_config(tmp_path / "t.json", kind="gaussian_table1", trials=2, n_train=200, n_test=200, epochs=3)
    assert main(["run", cfg, "--output-dir", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o" / "curves.csv") as fh:
        rows = list(csv.DictReader(fh))
    acc = {}
    for r in rows:
        acc.setdefault(r["method"], {})[int(r["trial"])] = float(r["value"])
    summary = json.loads((tmp_path / "o" / "results.json").read_text())["summary"]
    diff = [100 * (acc["lce_a0"][t] - acc["confidence"][t]) for t in (0, 1)]
    assert summary["difference_pct"]["confidence"]["mean"] == pytest.approx(summarize(diff)["mean"], abs=1e-12)
    assert len(summary["difference_pct"]) == 5


def test_unknown_key_exit(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", kind="coverage_study", epoch=3)
    assert main(["run", cfg]) == 2
    assert "epoch" in capsys.readouterr().err


def test_missing_config_exit(tmp_path):
    assert main(["run", str(tmp_path / "absent.json")]) == 2


def test_trial_failure_exit(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", kind="coverage_study", methods=["magic"], **SMALL)
    assert main(["run", cfg, "--output-dir", str(tmp_path / "o")]) == 1
    assert "trial 0" in capsys.readouterr().err
    assert "magic" in (tmp_path / "o" / "run.log").read_text()


def test_verify_passes(capsys):
    assert main(["verify", "--grad-trials", "50"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_planted_gradient_fault_is_caught():
    from deferral import losses

    def broken(g, y, m, alpha=1.0):
        ev = losses.eval_lce_alpha(g, y, m, alpha)
        return losses.LossEval(ev.value, ev.grad * 1.01)

    checks = check_gradients(trials=20, funcs={"lce": broken})
    failed = {c.name for c in checks if not c.passed}
    assert failed == {"gradient lce_alpha1", "gradient lce_alpha"}


def test_suite_prints_table():
    buf = io.StringIO()
    checks = run_verification_suite(grad_trials=20, stream=buf)
    assert all(isinstance(c, Check) for c in checks)
    assert len(buf.getvalue().splitlines()) == len(checks)


@pytest.mark.parametrize("kind, extra", [("gaussian_mixture", {}), ("gaussian_mixture", {"expert": "group_pq"}),
                                         ("multiclass_blobs", {"K": 4, "expert_k": 2})])
def test_gen_data(tmp_path, kind, extra):
    cfg = write_config(tmp_path / "g.json", kind=kind, n_train=50, n_test=30, d=3, seed=1, **extra)
    assert main(["gen-data", cfg, "--output-dir", str(tmp_path / "data")]) == 0
    manifest = json.loads((tmp_path / "data" / "train.manifest.json").read_text())
    data = load_dataset_csv(tmp_path / "data" / "train.csv", CsvSchema(**manifest["schema"]))
    assert len(data) == 50 and data.d == 3 and data.m is not None
    if kind == "multiclass_blobs":
        correct = data.m == data.y
        assert correct[data.y < 2].all()


def test_gen_data_rejects_unknown(tmp_path):
    cfg = write_config(tmp_path / "g.json", kind="gaussian_mixture", sigma=3)
    assert main(["gen-data", cfg, "--output-dir", str(tmp_path / "d")]) == 2
