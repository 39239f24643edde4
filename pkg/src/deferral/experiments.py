"""Experiment drivers: per-trial work units, a bounded worker pool and
aggregation into ``results.json`` / ``curves.csv`` payloads.

Every driver emits its per-trial numbers as curve rows
``(method, task, coverage, metric, value, seed, trial)``; the aggregates in
``results.json`` are computed from those rows only (see :func:`aggregate_rows`).
"""
from __future__ import annotations

import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from .bayes import DistributionSpec, bayes_solution, lmix_population_rejector, random_distribution, verify_consistency
from .core import DeferralDataset, InvalidInputError, softmax_stable
from .data import GaussianMixtureConfig, gen_gaussian_mixture, gen_multiclass_blobs, mask_features
from .evaluation import coverage_sweep, deferral_scores, learned_oracle_rejector, system_metrics
from .experts import ExpertSpec, expert_predict_batch, fit_expert_model, evaluate_expert_model, group1_bayes_expert
from .optim import (
    DEFAULT_ALPHA_GRID,
    TrainConfig,
    defer_margin,
    select_alpha,
    system_predictions,
    temperature_scale,
    train_sgd,
)

log = logging.getLogger(__name__)

KINDS = ("gaussian_table1", "consistency_suite", "coverage_study", "sample_complexity", "noise_study",
         "expert_model_eval")
WORKERS_ENV = "DEFERRAL_WORKERS"

DEFAULT_METHODS = {
    "gaussian_table1": ["lce", "confidence", "oracle", "mixofexp"],
    "consistency_suite": ["lce", "lmix"],
    "coverage_study": ["ours", "model_confidence", "confidence"],
    "sample_complexity": ["ours"],
    "noise_study": ["ours", "model_confidence", "confidence"],
    "expert_model_eval": ["ccn", "table_lookup", "logistic"],
}


class ConfigError(ValueError):
    pass


class ExperimentFailed(RuntimeError):
    def __init__(self, errors: list):
        super().__init__(f"{len(errors)} trial(s) failed: " + "; ".join(f"trial {t}: {m}" for t, m, _ in errors))
        self.errors = errors


@dataclass
class ExperimentConfig:
    kind: str
    trials: int = 1
    seed: int = 0
    methods: Optional[list] = None
    alpha: float = 1.0
    alpha_grid: Optional[list] = None
    select_alpha: bool = False
    # model / optimiser
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 64
    standardize: bool = True
    hidden: Optional[int] = None
    mixofexp_loss: str = "lmix"
    # data
    d: int = 10
    n_train: int = 1000
    n_test: int = 1000
    val_fraction: float = 0.2
    # experts
    expert_p: float = 0.95
    expert_q: float = 0.55
    # evaluation
    coverage_grid: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    coverage_metrics: list = field(default_factory=lambda: ["accuracy", "auroc", "aupr"])
    target_coverage: float = 0.7
    data_fractions: list = field(default_factory=lambda: [0.05, 0.1, 0.25, 0.5, 1.0])
    noise_fractions: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    mask_mode: str = "random_block"
    # consistency suite
    n_distributions: int = 100
    points_per_distribution: int = 10
    max_classes: int = 5
    optimizer_budget: int = 5000
    # expert-behaviour models
    n_tasks: int = 5
    n_annotations: int = 500
    annotation_train: int = 400
    annotation_test: int = 100
    # output
    output_dir: str = "results"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown experiment kind {self.kind!r}")
        if int(self.trials) < 1:
            raise ConfigError("trials: must be >= 1")
        if self.methods is None:
            self.methods = list(DEFAULT_METHODS[self.kind])
        if self.alpha_grid is None:
            self.alpha_grid = [0.0, 0.5, 1.0] if self.kind == "gaussian_table1" else list(DEFAULT_ALPHA_GRID)
        if not self.alpha_grid:
            raise ConfigError("alpha_grid: must not be empty")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"{key}: unknown config key")
        if "kind" not in raw:
            raise ConfigError("kind: missing required key")
        return cls(**raw)

    def train_config(self, **over) -> TrainConfig:
        base = TrainConfig(lr=self.lr, momentum=self.momentum, epochs=self.epochs, batch_size=self.batch_size,
                           standardize=self.standardize, hidden=self.hidden)
        return replace(base, **over)


def trial_seed(master: int, index: int, *stream: int) -> int:
    """Independent 32-bit seed for ``(master seed, trial index, sub-stream...)``."""
    return int(np.random.SeedSequence([int(master), int(index), *map(int, stream)]).generate_state(1)[0])


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}: expected an integer, got {raw!r}") from None
    return max(1, n)


def _guarded(fn, cfg, index):
    try:
        return index, fn(cfg, index), None
    except Exception as exc:  # reported per trial by the caller
        return index, None, (f"{type(exc).__name__}: {exc}", traceback.format_exc())


def map_trials(fn: Callable, cfg: ExperimentConfig, n: int, workers: Optional[int] = None) -> list:
    """Run ``fn(cfg, i)`` for ``i < n``; results come back in index order.

    Raises :class:`ExperimentFailed` listing every failed index.
    """
    workers = worker_count() if workers is None else workers
    if workers <= 1 or n <= 1:
        out = [_guarded(fn, cfg, i) for i in range(n)]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, n)) as pool:
            out = list(pool.map(_guarded, [fn] * n, [cfg] * n, range(n)))
    errors = [(i, err[0], err[1]) for i, _, err in out if err is not None]
    for i, msg, tb in errors:
        log.error("trial %d failed: %s\n%s", i, msg, tb)
    if errors:
        raise ExperimentFailed(errors)
    return [res for _, res, _ in out]


# ---------------------------------------------------------------------------
# aggregation


def summarize(values) -> dict:
    """Mean, sample sd, normal-approximation 95% CI and quartiles."""
    v = np.asarray(values, dtype=float)
    n = v.size
    mean = float(v.mean())
    sd = float(v.std(ddof=1)) if n > 1 else 0.0
    half = 1.96 * sd / np.sqrt(n)
    return {"n": n, "mean": mean, "sd": sd, "ci95": [mean - half, mean + half],
            "q25": float(np.quantile(v, 0.25)), "q75": float(np.quantile(v, 0.75))}


def aggregate_rows(rows: list) -> list:
    """Group curve rows by ``(method, task, coverage, metric)`` and summarise
    the values over trials. Output order is sorted by the group key."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r[0], r[1], float(r[2]), r[3]), []).append(float(r[4]))
    return [{"method": m, "task": t, "coverage": c, "metric": k, **summarize(v)}
            for (m, t, c, k), v in sorted(groups.items())]


def paired_differences(rows: list, reference: str, metric: str = "system_accuracy", scale: float = 100.0) -> dict:
    """``reference - other`` per trial (in percentage points by default),
    summarised for every other method appearing in ``rows``."""
    by = {}
    for r in rows:
        if r[3] == metric:
            by.setdefault(r[0], {})[r[6]] = float(r[4])
    if reference not in by:
        raise InvalidInputError(f"reference method {reference!r} has no rows")
    out = {}
    for meth in sorted(by):
        if meth == reference:
            continue
        trials = sorted(set(by[meth]) & set(by[reference]))
        diffs = [scale * (by[reference][t] - by[meth][t]) for t in trials]
        out[meth] = summarize(diffs)
    return out


# ---------------------------------------------------------------------------
# shared pieces


def _expert_correct_model(data: DeferralDataset, tcfg: TrainConfig):
    agree = DeferralDataset(x=data.x, y=data.agree.astype(int), K=2)
    return train_sgd(agree, replace(tcfg, loss="ce"))


def _split_fit_val(data: DeferralDataset, frac: float, seed: int):
    n_val = int(round(frac * len(data)))
    perm = np.random.default_rng(seed).permutation(len(data))
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


def _method_outputs(method: str, fit, val, test, cfg: ExperimentConfig, seed: int):
    """Deferral priority ``q``, class predictions and positive-class scores
    on ``test`` for one deferral method."""
    tcfg = cfg.train_config(seed=seed)
    if method == "ours":
        if cfg.select_alpha:
            half = len(fit) // 2
            t1, t2 = fit.subset(np.arange(half)), fit.subset(np.arange(half, len(fit)))
            _, model, _ = select_alpha(t1, t2, val, cfg.alpha_grid, tcfg)
        else:
            model = train_sgd(fit, replace(tcfg, loss="lce", alpha=cfg.alpha))
        S = model.forward(test.x)
        P = softmax_stable(S[:, :-1])
        return deferral_scores("ours", model_scores=S), P.argmax(axis=1), P[:, -1]
    if method not in ("model_confidence", "confidence"):
        raise ConfigError(f"methods: unknown method {method!r} for this experiment")
    clf = train_sgd(fit, replace(tcfg, loss="ce"))
    T = temperature_scale(clf.forward(val.x), val.y)
    P = softmax_stable(clf.forward(test.x) / T)
    pe = None
    if method == "confidence":
        em = _expert_correct_model(fit, replace(tcfg, seed=seed + 1))
        Te = temperature_scale(em.forward(val.x), val.agree.astype(int))
        pe = softmax_stable(em.forward(test.x) / Te)[:, 1]
    q = deferral_scores(method, classifier_probs=P, expert_correct_prob=pe)
    return q, P.argmax(axis=1), P[:, -1]


def _mixture_with_expert(cfg: ExperimentConfig, seed: int):
    train, test = gen_gaussian_mixture(GaussianMixtureConfig(d=cfg.d, n_train=cfg.n_train,
                                                             n_test=cfg.n_test, seed=seed))
    spec = ExpertSpec("group_pq", K=2, p=cfg.expert_p, q=cfg.expert_q)
    rng = np.random.default_rng(trial_seed(seed, 0, 1))
    train = train.with_expert(expert_predict_batch(spec, train, rng))
    test = test.with_expert(expert_predict_batch(spec, test, rng))
    return train, test


# ---------------------------------------------------------------------------
# gaussian_table1


def table1_trial(cfg: ExperimentConfig, t: int) -> list:
    seed = trial_seed(cfg.seed, t)
    train, test = gen_gaussian_mixture(GaussianMixtureConfig(d=cfg.d, n_train=cfg.n_train,
                                                             n_test=cfg.n_test, seed=seed))
    spec = group1_bayes_expert(train.info["params"])
    rng = np.random.default_rng(seed)
    train = train.with_expert(expert_predict_batch(spec, train, rng))
    test = test.with_expert(expert_predict_batch(spec, test, rng))
    rows = []

    def emit(name, final, deferred):
        acc = float(np.mean(final == test.y))
        rows.append([name, "gaussian_table1", float(1.0 - np.mean(deferred)), "system_accuracy", acc, seed, t])

    for j, method in enumerate(cfg.methods):
        tcfg = cfg.train_config(seed=trial_seed(seed, t, j))
        if method == "lce":
            for alpha in cfg.alpha_grid:
                model = train_sgd(train, replace(tcfg, loss="lce", alpha=float(alpha)))
                S = model.forward(test.x)
                deferred = defer_margin(S) >= 0
                emit(f"lce_a{float(alpha):g}", np.where(deferred, test.m, S[:, :-1].argmax(axis=1)), deferred)
        elif method == "confidence":
            clf = train_sgd(train, replace(tcfg, loss="ce"))
            em = _expert_correct_model(train, replace(tcfg, seed=tcfg.seed + 1))
            T = temperature_scale(clf.forward(train.x), train.y)
            Te = temperature_scale(em.forward(train.x), train.agree.astype(int))
            P = softmax_stable(clf.forward(test.x) / T)
            pe = softmax_stable(em.forward(test.x) / Te)[:, 1]
            deferred = deferral_scores("confidence", classifier_probs=P, expert_correct_prob=pe) >= 0
            emit("confidence", np.where(deferred, test.m, P.argmax(axis=1)), deferred)
        elif method == "oracle":
            group0 = train.subset(np.flatnonzero(train.a == 0))
            clf = train_sgd(group0 if len(group0) else train, replace(tcfg, loss="ce"))
            rej = learned_oracle_rejector(train, replace(tcfg, seed=tcfg.seed + 1))
            deferred = rej.defer(test.x)
            emit("oracle", np.where(deferred, test.m, clf.forward(test.x).argmax(axis=1)), deferred)
        elif method == "mixofexp":
            model = train_sgd(train, replace(tcfg, loss=cfg.mixofexp_loss))
            S = model.forward(test.x)
            deferred = S[:, -1] > S[:, -2]
            emit("mixofexp", np.where(deferred, test.m, S[:, :-2].argmax(axis=1)), deferred)
        else:
            raise ConfigError(f"methods: unknown method {method!r} for gaussian_table1")
    return rows


def run_table1(cfg: ExperimentConfig, workers=None) -> dict:
    rows = [r for part in map_trials(table1_trial, cfg, cfg.trials, workers) for r in part]
    names = sorted({r[0] for r in rows})
    reference = "lce_a0" if "lce_a0" in names else names[0]
    return {
        "rows": rows,
        "summary": {
            "reference": reference,
            "accuracy_pct": {m: summarize([100 * r[4] for r in rows if r[0] == m]) for m in names},
            "difference_pct": paired_differences(rows, reference),
        },
    }


# ---------------------------------------------------------------------------
# consistency_suite


def consistency_trial(cfg: ExperimentConfig, i: int) -> dict:
    rng = np.random.default_rng(trial_seed(cfg.seed, i))
    K = 2 + i % max(1, cfg.max_classes - 1)
    dist = random_distribution(rng, K, cfg.points_per_distribution)
    return {loss: asdict(verify_consistency(dist, loss, cfg.optimizer_budget)) for loss in cfg.methods}


def lmix_witness(max_iter: int = 5000) -> dict:
    """The three-class point where the mixture rejector and the Bayes rule part."""
    dist = DistributionSpec([1.0], [[0.5, 0.25, 0.25]], [0.4])
    rep = verify_consistency(dist, "lmix", max_iter)
    _, r_b = bayes_solution(dist)
    return {
        "eta": [0.5, 0.25, 0.25], "pm": 0.4,
        "rule_defers": bool(lmix_population_rejector(dist.eta[0], 0.4)),
        "bayes_defers": bool(r_b[0]),
        "numerical_disagreement": rep.disagreements == [0],
        "max_grad_norm": rep.max_grad_norm,
    }


def run_consistency(cfg: ExperimentConfig, workers=None) -> dict:
    parts = map_trials(consistency_trial, cfg, cfg.n_distributions, workers)
    summary = {}
    for loss in cfg.methods:
        reps = [p[loss] for p in parts]
        compared = sum(r["n_compared"] for r in reps)
        agree = sum(r["n_agree_bayes"] for r in reps)
        rule_c = sum(r["n_compared_lmix_rule"] for r in reps)
        summary[loss] = {
            "distributions": len(reps),
            "points": sum(r["n_points"] for r in reps),
            "compared": compared,
            "excluded_near_ties": sum(len(r["excluded"]) for r in reps),
            "agreement": 1.0 if compared == 0 else agree / compared,
            "max_softmax_dev": max(r["max_softmax_dev"] for r in reps),
            "max_grad_norm": max(r["max_grad_norm"] for r in reps),
            "all_converged": all(r["converged"] for r in reps),
        }
        if loss == "lmix":
            summary[loss]["entropy_rule_agreement"] = (
                1.0 if rule_c == 0 else sum(r["n_agree_lmix_rule"] for r in reps) / rule_c)
    return {"rows": [], "summary": {"losses": summary, "lmix_witness": lmix_witness(cfg.optimizer_budget)}}


# ---------------------------------------------------------------------------
# coverage_study / sample_complexity / noise_study


def coverage_trial(cfg: ExperimentConfig, t: int) -> list:
    seed = trial_seed(cfg.seed, t)
    train, test = _mixture_with_expert(cfg, seed)
    fit, val = _split_fit_val(train, cfg.val_fraction, seed)
    rows = []
    for j, method in enumerate(cfg.methods):
        q, pred, score = _method_outputs(method, fit, val, test, cfg, trial_seed(seed, t, j))
        for metric in cfg.coverage_metrics:
            curve = coverage_sweep(q, pred, test.m, test.y, cfg.coverage_grid, metric, classifier_score=score,
                                   method=method, task="coverage", seed=seed, trial=t)
            rows.extend(curve.rows())
        k = int(round((1 - cfg.target_coverage) * len(test)))
        deferred = np.zeros(len(test), dtype=bool)
        deferred[np.argsort(-q, kind="stable")[:k]] = True
        disc = system_metrics(np.where(deferred, test.m, pred), deferred, test.y, group=test.a)["discrimination"]
        if disc is not None:
            rows.append([method, "coverage", repr(float(cfg.target_coverage)), "discrimination", repr(disc), seed, t])
    return rows


def _system_auroc_rows(method, q, pred, score, test, cfg, task, seed, t):
    curve = coverage_sweep(q, pred, test.m, test.y, [cfg.target_coverage], "auroc", classifier_score=score,
                           method=method, task=task, seed=seed, trial=t)
    return curve.rows()


def sample_complexity_trial(cfg: ExperimentConfig, t: int) -> list:
    seed = trial_seed(cfg.seed, t)
    train, test = _mixture_with_expert(cfg, seed)
    fit, val = _split_fit_val(train, cfg.val_fraction, seed)
    perm = np.random.default_rng(trial_seed(seed, t, 99)).permutation(len(fit))
    rows = []
    for frac in cfg.data_fractions:
        n = max(2, int(round(frac * len(fit))))
        part = fit.subset(np.sort(perm[:n]))
        for j, method in enumerate(cfg.methods):
            q, pred, score = _method_outputs(method, part, val, test, cfg, trial_seed(seed, t, j))
            rows.extend(_system_auroc_rows(method, q, pred, score, test, cfg, f"fraction={frac:g}", seed, t))
    return rows


def noise_trial(cfg: ExperimentConfig, t: int) -> list:
    seed = trial_seed(cfg.seed, t)
    train, test = _mixture_with_expert(cfg, seed)
    fit, val = _split_fit_val(train, cfg.val_fraction, seed)
    rows = []
    for frac in cfg.noise_fractions:
        fit_n = mask_features(fit, cfg.mask_mode, frac, seed=trial_seed(seed, t, 1))
        val_n = mask_features(val, cfg.mask_mode, frac, seed=trial_seed(seed, t, 2))
        test_n = mask_features(test, cfg.mask_mode, frac, seed=trial_seed(seed, t, 3))
        for j, method in enumerate(cfg.methods):
            q, pred, score = _method_outputs(method, fit_n, val_n, test_n, cfg, trial_seed(seed, t, j))
            rows.extend(_system_auroc_rows(method, q, pred, score, test_n, cfg, f"masked={frac:g}", seed, t))
    return rows


# ---------------------------------------------------------------------------
# expert_model_eval


def synthetic_annotations(cfg: ExperimentConfig):
    """Label vectors with correlated tasks and an expert whose per-task
    decision depends on the whole label vector through a logistic link."""
    rng = np.random.default_rng(trial_seed(cfg.seed, 0, 7))
    T = cfg.n_tasks
    latent = rng.standard_normal((cfg.n_annotations, 1))
    Y = (rng.standard_normal((cfg.n_annotations, T)) + latent > 0.5).astype(int)
    W = rng.normal(0.0, 1.0, (T, T)) + np.diag(rng.uniform(2.0, 4.0, T))
    b = rng.normal(-1.5, 0.5, T)
    P = 1.0 / (1.0 + np.exp(-(Y @ W.T + b)))
    E = (rng.uniform(size=P.shape) < P).astype(int)
    return Y, E


def expert_model_trial(cfg: ExperimentConfig, t: int) -> list:
    Y, E = synthetic_annotations(cfg)
    seed = trial_seed(cfg.seed, t)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(Y.shape[0])
    tr = perm[:cfg.annotation_train]
    te = perm[cfg.annotation_train:cfg.annotation_train + cfg.annotation_test]
    rows = []
    for method in cfg.methods:
        model = fit_expert_model(method, Y[tr], E[tr], seed=seed)
        for res in evaluate_expert_model(model, Y[te], E[te], rng):
            for key in ("auroc", "d_fpr", "d_tpr", "d_f1"):
                if res[key] is not None:
                    rows.append([method, f"task{res['task']}", repr(1.0), key, repr(float(res[key])), seed, t])
    return rows


# ---------------------------------------------------------------------------
# k-class expert on multiclass blobs


def k_perfect_comparison(K: int = 10, d: int = 10, n_train: int = 20000, n_test: int = 5000, ks=None,
                         spread: float = 1.0, tcfg: Optional[TrainConfig] = None, seed: int = 0) -> list:
    """System accuracy of a deferral model next to the classifier alone and
    the expert alone, for experts perfect on the first ``k`` classes.

    The classifier baseline is a separately trained cross-entropy model of
    the same architecture. Returns one dict per ``k``.
    """
    tcfg = tcfg or TrainConfig(hidden=64, epochs=100, lr=0.01, standardize=True)
    ks = [0, K // 2, K] if ks is None else ks
    rng = np.random.default_rng(seed)
    train, centers = gen_multiclass_blobs(n_train, K, d, rng, spread=spread)
    test, _ = gen_multiclass_blobs(n_test, K, d, rng, spread=spread, centers=centers)
    clf = train_sgd(train, replace(tcfg, loss="ce", seed=trial_seed(seed, 0, 1)))
    clf_acc = float(np.mean(clf.forward(test.x).argmax(axis=1) == test.y))
    out = []
    for k in ks:
        spec = ExpertSpec("k_perfect", K=K, k=k)
        erng = np.random.default_rng(trial_seed(seed, k, 2))
        tr = train.with_expert(expert_predict_batch(spec, train, erng))
        te = test.with_expert(expert_predict_batch(spec, test, erng))
        model = train_sgd(tr, replace(tcfg, loss="lce", alpha=1.0, seed=trial_seed(seed, k, 3)))
        _, deferred, final = system_predictions(model, te)
        out.append({"k": k, "system_accuracy": float(np.mean(final == te.y)), "classifier_accuracy": clf_acc,
                    "expert_accuracy": float(np.mean(te.m == te.y)), "coverage": float(1 - deferred.mean())})
    return out


def _rows_run(trial_fn):
    def run(cfg: ExperimentConfig, workers=None) -> dict:
        rows = [r for part in map_trials(trial_fn, cfg, cfg.trials, workers) for r in part]
        rows = [[r[0], r[1], float(r[2]), r[3], float(r[4]), int(r[5]), int(r[6])] for r in rows]
        return {"rows": rows, "summary": {"aggregates": aggregate_rows(rows)}}

    return run


RUNNERS = {
    "gaussian_table1": run_table1,
    "consistency_suite": run_consistency,
    "coverage_study": _rows_run(coverage_trial),
    "sample_complexity": _rows_run(sample_complexity_trial),
    "noise_study": _rows_run(noise_trial),
    "expert_model_eval": _rows_run(expert_model_trial),
}


def run(cfg: ExperimentConfig, workers: Optional[int] = None) -> dict:
    """Execute ``cfg`` and return ``{"rows": curve rows, "summary": ...}``."""
    if cfg.kind == "expert_model_eval" and cfg.annotation_train + cfg.annotation_test > cfg.n_annotations:
        raise ConfigError("annotation_train: train + test exceeds n_annotations")
    return RUNNERS[cfg.kind](cfg, workers)
