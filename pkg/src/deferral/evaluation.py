"""System metrics, ranking metrics, deferral scores and coverage sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import InvalidInputError, UndefinedMetricError, softmax_stable

CURVE_HEADER = ["method", "task", "coverage", "metric", "value", "seed", "trial"]


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else float(num) / float(den)


def binary_rates(pred, y) -> dict:
    """Confusion counts and FPR/TPR/F1 for the positive class 1.

    Rates with an empty denominator are ``None``.
    """
    pred = np.asarray(pred).astype(int)
    y = np.asarray(y).astype(int)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return {
        "tp": tp, "fp": fp, "tn": tn, "fn": fn,
        "fpr": _ratio(fp, fp + tn), "tpr": _ratio(tp, tp + fn),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }


def system_metrics(final_pred, deferred, y, group=None, require_group: bool = False) -> dict:
    """Metrics of the combined classifier + expert system.

    ``final_pred`` is the classifier's answer where ``deferred`` is False
    and the expert's where it is True. FPR/TPR/F1 are reported for binary
    targets only. ``discrimination`` is ``FPR(group 1) - FPR(group 0)``.
    Undefined quantities are ``None``.
    """
    final_pred = np.asarray(final_pred).astype(int)
    deferred = np.asarray(deferred, dtype=bool)
    y = np.asarray(y).astype(int)
    n = y.size
    if n == 0:
        raise InvalidInputError("no predictions")
    if not final_pred.shape == deferred.shape == y.shape:
        raise InvalidInputError("prediction arrays differ in length")
    if require_group and group is None:
        raise InvalidInputError("group metrics requested without group bits")
    correct = final_pred == y
    out = {
        "system_accuracy": float(correct.mean()),
        "coverage": float(1.0 - deferred.mean()),
        "classifier_accuracy": _ratio(np.sum(correct & ~deferred), np.sum(~deferred)),
        "expert_accuracy": _ratio(np.sum(correct & deferred), np.sum(deferred)),
        "fpr": None, "tpr": None, "f1": None, "discrimination": None,
    }
    binary = np.all((y == 0) | (y == 1)) and np.all((final_pred == 0) | (final_pred == 1))
    if binary:
        out.update({k: v for k, v in binary_rates(final_pred, y).items() if k in ("fpr", "tpr", "f1")})
    if group is not None:
        group = np.asarray(group).astype(int)
        if binary:
            f1 = binary_rates(final_pred[group == 1], y[group == 1])["fpr"] if np.any(group == 1) else None
            f0 = binary_rates(final_pred[group == 0], y[group == 0])["fpr"] if np.any(group == 0) else None
            if f1 is not None and f0 is not None:
                out["discrimination"] = f1 - f0
    return out


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(s.size, dtype=float)
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0
    return ranks


def auroc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    s = np.asarray(scores, dtype=float).ravel()
    lab = np.asarray(labels).astype(int).ravel()
    if s.shape != lab.shape:
        raise InvalidInputError("scores and labels differ in length")
    n_pos = int(np.sum(lab == 1))
    n_neg = lab.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AU-ROC needs both classes")
    ranks = _average_ranks(s)
    u = ranks[lab == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Area under the precision-recall curve with step-wise precision.

    Each distinct score is a threshold; the recall gained at a threshold is
    weighted by the precision there. No linear interpolation.
    """
    s = np.asarray(scores, dtype=float).ravel()
    lab = np.asarray(labels).astype(int).ravel()
    n_pos = int(np.sum(lab == 1))
    if n_pos == 0:
        raise UndefinedMetricError("AU-PR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    ss, ll = s[order], lab[order]
    tp = np.cumsum(ll == 1)
    ends = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1.0)
    recall = tp_at / n_pos
    gained = np.diff(np.r_[0.0, recall])
    return float(np.sum(gained * precision))


def deferral_scores(method: str, model_scores=None, classifier_probs=None, expert_correct_prob=None) -> np.ndarray:
    """Per-example deferral priority ``q`` (defer the largest first).

    * ``ours``: ``g_defer - max_y g_y`` from a joint model's raw scores.
    * ``model_confidence``: ``1 - max`` of (calibrated) class probabilities.
    * ``confidence``: calibrated expert-correctness probability minus the
      classifier's max probability.
    """
    if method == "ours":
        if model_scores is None:
            raise InvalidInputError("ours needs model scores")
        S = np.atleast_2d(np.asarray(model_scores, dtype=float))
        return S[:, -1] - S[:, :-1].max(axis=1)
    if classifier_probs is None:
        raise InvalidInputError(f"{method} needs classifier probabilities")
    P = np.atleast_2d(np.asarray(classifier_probs, dtype=float))
    if method == "model_confidence":
        return 1.0 - P.max(axis=1)
    if method == "confidence":
        if expert_correct_prob is None:
            raise InvalidInputError("confidence method needs an expert-correctness model")
        e = np.asarray(expert_correct_prob, dtype=float).ravel()
        if e.size != P.shape[0]:
            raise InvalidInputError("shape mismatch between expert and classifier outputs")
        return e - P.max(axis=1)
    raise InvalidInputError(f"unknown deferral method {method!r}")


def deferral_count(coverage: float, n: int) -> int:
    """``round((1 - coverage) * n)`` with halves rounded up."""
    return int(math.floor((1.0 - coverage) * n + 0.5 + 1e-9))


def defer_top(q, n_defer: int) -> np.ndarray:
    """Mask deferring the ``n_defer`` largest ``q``; ties go to the lower index."""
    q = np.asarray(q, dtype=float)
    order = np.argsort(-q, kind="stable")
    mask = np.zeros(q.size, dtype=bool)
    mask[order[:n_defer]] = True
    return mask


@dataclass
class CoverageCurve:
    method: str
    task: str
    metric: str
    points: list = field(default_factory=list)  # (coverage, value)
    deferred_counts: list = field(default_factory=list)
    seed: int = 0
    trial: int = 0

    def rows(self) -> list:
        return [[self.method, self.task, repr(float(c)), self.metric, repr(float(v)), self.seed, self.trial]
                for c, v in self.points]

    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.points], dtype=float)


def _metric(metric: str, final, y, scores) -> Optional[float]:
    if metric == "accuracy":
        return float(np.mean(final == y))
    try:
        if metric == "auroc":
            return auroc(scores, y)
        if metric == "aupr":
            return aupr(scores, y)
    except UndefinedMetricError:
        return None
    raise InvalidInputError(f"unknown metric {metric!r}")


def coverage_sweep(q, classifier_pred, expert_pred, y, grid: Sequence[float], metric: str = "accuracy",
                   classifier_score=None, expert_score=None, method: str = "", task: str = "",
                   seed: int = 0, trial: int = 0) -> CoverageCurve:
    """System metric at each target coverage.

    At coverage ``c`` exactly ``round((1 - c) n)`` examples are deferred:
    those with the largest ``q``, ties broken by index. For ranking metrics
    the system score is ``classifier_score`` on kept examples and
    ``expert_score`` (default: the expert's label) on deferred ones. Points
    where the metric is undefined are left out.
    """
    q = np.asarray(q, dtype=float)
    cp = np.asarray(classifier_pred).astype(int)
    ep = np.asarray(expert_pred).astype(int)
    y = np.asarray(y).astype(int)
    n = y.size
    cs = None if classifier_score is None else np.asarray(classifier_score, dtype=float)
    es = ep.astype(float) if expert_score is None else np.asarray(expert_score, dtype=float)
    if metric != "accuracy" and cs is None:
        raise InvalidInputError(f"{metric} sweep needs classifier scores")
    grid = np.unique(np.asarray(grid, dtype=float))
    if grid.size and (grid[0] < 0 or grid[-1] > 1):
        raise InvalidInputError("coverage grid must lie in [0, 1]")
    order = np.argsort(-q, kind="stable")
    curve = CoverageCurve(method=method, task=task, metric=metric, seed=seed, trial=trial)
    for c in grid:
        k = deferral_count(c, n)
        mask = np.zeros(n, dtype=bool)
        mask[order[:k]] = True
        final = np.where(mask, ep, cp)
        scores = None if cs is None else np.where(mask, es, cs)
        v = _metric(metric, final, y, scores)
        if v is None:
            continue
        curve.points.append((float(c), v))
        curve.deferred_counts.append(k)
    return curve


def write_curves_csv(curves, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for cv in curves:
            w.writerows(cv.rows())


def read_curves_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CURVE_HEADER:
            raise InvalidInputError(f"curve CSV header must be {CURVE_HEADER}")
        return [{"method": r["method"], "task": r["task"], "coverage": float(r["coverage"]),
                 "metric": r["metric"], "value": float(r["value"]), "seed": int(r["seed"]),
                 "trial": int(r["trial"])} for r in reader]


# ---------------------------------------------------------------------------
# learned oracle rejector


@dataclass
class RegionRejector:
    """Binary classifier of the expert-competent region; defers on membership."""

    model: Optional[object] = None
    constant: Optional[bool] = None

    def defer(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.constant is not None:
            return np.full(X.shape[0], self.constant)
        return softmax_stable(self.model.forward(X))[:, 1] >= 0.5


def learned_oracle_rejector(train, cfg, region=None) -> RegionRejector:
    """Fit a rejector to the region where the expert is competent.

    ``region`` gives the binary membership target; by default the group
    bits of ``train`` are used.
    """
    from dataclasses import replace

    from .core import DeferralDataset
    from .optim import train_sgd

    target = train.a if region is None else np.asarray(region)
    if target is None:
        raise InvalidInputError("oracle rejector needs group bits or a region target")
    target = np.asarray(target).astype(int)
    if target.min() == target.max():
        return RegionRejector(constant=bool(target[0]))
    model = train_sgd(DeferralDataset(x=train.x, y=target, K=2), replace(cfg, loss="ce"))
    return RegionRejector(model=model)
