import numpy as np
import pytest

from deferral.experiments import (
    ConfigError,
    ExperimentConfig,
    ExperimentFailed,
    aggregate_rows,
    k_perfect_comparison,
    lmix_witness,
    map_trials,
    paired_differences,
    run,
    summarize,
    table1_trial,
    trial_seed,
    worker_count,
)
from deferral.optim import TrainConfig


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="lerning_rate"):
        ExperimentConfig.from_dict({"kind": "coverage_study", "lerning_rate": 0.1})


@pytest.mark.parametrize("raw", [{"trials": 3}, {"kind": "cifar"}, {"kind": "noise_study", "trials": 0}, []])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_default_alpha_grids():
    assert ExperimentConfig("gaussian_table1").alpha_grid == [0.0, 0.5, 1.0]
    grid = ExperimentConfig("coverage_study").alpha_grid
    assert grid[0] == 0.0 and 1.0 in grid


def test_trial_seeds_are_distinct_and_stable():
    seeds = {trial_seed(0, t) for t in range(1000)}
    assert len(seeds) == 1000
    assert trial_seed(5, 3, 1) == trial_seed(5, 3, 1) != trial_seed(5, 3, 2)


def test_summarize():
    s = summarize([1.0, 2.0, 3.0, 4.0])
    assert s["mean"] == 2.5 and s["sd"] == pytest.approx(np.std([1, 2, 3, 4], ddof=1))
    half = 1.96 * s["sd"] / 2
    assert s["ci95"] == pytest.approx([2.5 - half, 2.5 + half])
    assert (s["q25"], s["q75"]) == (1.75, 3.25)


def test_paired_differences():
    rows = [["a", "t", 1.0, "system_accuracy", 0.9, 0, 0], ["b", "t", 1.0, "system_accuracy", 0.8, 0, 0],
            ["a", "t", 1.0, "system_accuracy", 0.7, 0, 1], ["b", "t", 1.0, "system_accuracy", 0.8, 0, 1]]
    d = paired_differences(rows, "a")
    assert list(d) == ["b"] and d["b"]["mean"] == pytest.approx(0.0)
    assert d["b"]["sd"] == pytest.approx(np.std([10, -10], ddof=1))


def test_aggregate_rows_groups_by_key():
    rows = [["m", "t", 0.5, "auroc", v, 0, i] for i, v in enumerate([0.6, 0.8])]
    rows.append(["m", "t", 1.0, "auroc", 0.9, 0, 0])
    agg = aggregate_rows(rows)
    assert [(a["coverage"], a["n"]) for a in agg] == [(0.5, 2), (1.0, 1)]
    assert agg[0]["mean"] == pytest.approx(0.7)


def _boom(cfg, i):
    if i == 1:
        raise RuntimeError("planted")
    return i


def _square(cfg, i):
    return i * i


def test_map_trials_reports_failures():
    cfg = ExperimentConfig("coverage_study")
    with pytest.raises(ExperimentFailed) as err:
        map_trials(_boom, cfg, 3, workers=1)
    assert [e[0] for e in err.value.errors] == [1]


def test_worker_pool_keeps_order():
    cfg = ExperimentConfig("coverage_study")
    assert map_trials(_square, cfg, 5, workers=2) == [0, 1, 4, 9, 16]
    with pytest.raises(ExperimentFailed):
        map_trials(_boom, cfg, 3, workers=2)


def test_worker_env(monkeypatch):
    monkeypatch.setenv("DEFERRAL_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("DEFERRAL_WORKERS", "many")
    with pytest.raises(ConfigError):
        worker_count()


def test_table1_smoke():
    cfg = ExperimentConfig("gaussian_table1", trials=1, n_train=300, n_test=300, epochs=10)
    out = run(cfg, workers=1)
    methods = {r[0] for r in out["rows"]}
    assert methods == {"lce_a0", "lce_a0.5", "lce_a1", "confidence", "oracle", "mixofexp"}
    assert set(out["summary"]["difference_pct"]) == methods - {"lce_a0"}
    for r in out["rows"]:
        assert 0.0 <= r[4] <= 1.0 and 0.0 <= r[2] <= 1.0


def test_table1_trial_deterministic():
    cfg = ExperimentConfig("gaussian_table1", n_train=200, n_test=200, epochs=5)
    assert table1_trial(cfg, 2) == table1_trial(cfg, 2)


def test_consistency_run():
    cfg = ExperimentConfig("consistency_suite", n_distributions=10, points_per_distribution=5)
    summary = run(cfg, workers=1)["summary"]
    assert summary["losses"]["lce"]["agreement"] == 1.0
    assert summary["losses"]["lmix"]["entropy_rule_agreement"] == 1.0
    w = summary["lmix_witness"]
    assert w["rule_defers"] and not w["bayes_defers"] and w["numerical_disagreement"]


def test_witness_direct():
    assert lmix_witness()["numerical_disagreement"]


@pytest.mark.parametrize("kind", ["coverage_study", "sample_complexity", "noise_study"])
def test_sweep_runs(kind):
    cfg = ExperimentConfig(kind, trials=1, n_train=200, n_test=200, epochs=3, coverage_grid=[0.0, 0.5, 1.0],
                           data_fractions=[0.5, 1.0], noise_fractions=[0.0, 0.5])
    out = run(cfg, workers=1)
    assert out["rows"] and out["summary"]["aggregates"]
    tasks = {r[1] for r in out["rows"]}
    if kind == "sample_complexity":
        assert tasks == {"fraction=0.5", "fraction=1"}
    if kind == "noise_study":
        assert tasks == {"masked=0", "masked=0.5"}


def test_coverage_endpoints_in_study():
    cfg = ExperimentConfig("coverage_study", n_train=200, n_test=200, epochs=3, coverage_grid=[0.0, 1.0],
                           coverage_metrics=["accuracy"])
    rows = run(cfg, workers=1)["rows"]
    at0 = {r[4] for r in rows if r[2] == 0.0 and r[3] == "accuracy"}
    assert len(at0) == 1  # every method hands everything to the same expert labels


def test_select_alpha_path():
    cfg = ExperimentConfig("coverage_study", n_train=200, n_test=100, epochs=2, select_alpha=True,
                           alpha_grid=[0.0, 1.0], methods=["ours"], coverage_grid=[0.5])
    assert run(cfg, workers=1)["rows"]


def test_expert_model_eval():
    cfg = ExperimentConfig("expert_model_eval", trials=2, methods=["ccn", "table_lookup"])
    out = run(cfg, workers=1)
    metrics = {r[3] for r in out["rows"]}
    assert {"auroc", "d_fpr", "d_tpr"} <= metrics


def test_expert_model_eval_bad_sizes():
    with pytest.raises(ConfigError):
        run(ExperimentConfig("expert_model_eval", annotation_train=450, annotation_test=100), workers=1)


def test_unknown_method_fails_trial():
    with pytest.raises(ExperimentFailed):
        run(ExperimentConfig("coverage_study", n_train=100, n_test=50, epochs=1, methods=["magic"]), workers=1)


def test_k_perfect_small():
    out = k_perfect_comparison(K=4, d=4, n_train=2000, n_test=1000, spread=0.5,
                               tcfg=TrainConfig(hidden=16, epochs=10, standardize=True))
    assert [r["k"] for r in out] == [0, 2, 4]
    assert out[-1]["expert_accuracy"] == 1.0
    assert out[-1]["system_accuracy"] >= 0.95
