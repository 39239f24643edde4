"""Self-contained verification suite over the library's checkable claims."""
from __future__ import annotations

import itertools
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import losses as L
from .bayes import random_distribution, verify_consistency
from .evaluation import aupr, auroc, coverage_sweep, deferral_count
from .experiments import lmix_witness
from .optim import GRAD_CHECK_LOSSES, grad_check


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def brute_force_auroc(scores, labels) -> float:
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels).astype(int)
    pos, neg = s[lab == 1], s[lab == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (pos.size * neg.size)


def enumerated_aupr(scores, labels) -> float:
    """Step-wise AU-PR by scanning every distinct threshold from the top."""
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels).astype(int)
    n_pos = lab.sum()
    area, prev_recall = 0.0, 0.0
    for thr in sorted(set(s.tolist()), reverse=True):
        sel = s >= thr
        tp = np.sum(sel & (lab == 1))
        recall = tp / n_pos
        area += (recall - prev_recall) * tp / sel.sum()
        prev_recall = recall
    return float(area)


def check_gradients(trials: int = 1000, funcs: Optional[dict] = None) -> list:
    out = []
    for loss in GRAD_CHECK_LOSSES:
        rep = grad_check(loss, trials=trials, funcs=funcs)
        out.append(Check(f"gradient {loss}", rep.passed, f"max rel err {rep.max_rel_err:.2e}"))
    return out


def check_upper_bound(n: int = 100_000, seed: int = 0) -> tuple:
    """Base-2 deferral cross entropy against the 0-1 system loss.

    Returns the check and the number of violations in natural log, which is
    reported but not asserted.
    """
    rng = np.random.default_rng(seed)
    K = rng.integers(2, 11, n)
    viol2 = violn = 0
    for k in np.unique(K):
        idx = np.flatnonzero(K == k)
        G = rng.normal(0, rng.uniform(0.1, 5.0, (idx.size, 1)), (idx.size, k + 1))
        y = rng.integers(0, k, idx.size)
        m = rng.integers(0, k, idx.size)
        l01 = L.loss_01_batch(G, y, m)
        agree = (m == y).astype(float)
        viol2 += int(np.sum(L.lce_alpha_batch(G, y, agree, 1.0, log_base=2)[0] < l01))
        violn += int(np.sum(L.lce_alpha_batch(G, y, agree, 1.0)[0] < l01))
    return Check("upper bound (log2) over 0-1 loss", viol2 == 0, f"{viol2} violations / {n}"), violn


def check_consistency(n_dist: int = 100, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    compared = agree = 0
    dev = 0.0
    for i in range(n_dist):
        rep = verify_consistency(random_distribution(rng, 2 + i % 4), "lce")
        compared += rep.n_compared
        agree += rep.n_agree_bayes
        dev = max(dev, rep.max_softmax_dev)
    ok = agree == compared and dev <= 1e-3
    return Check("consistency of deferral cross entropy", ok,
                 f"agreement {agree}/{compared}, max softmax dev {dev:.1e}")


def check_witness() -> Check:
    w = lmix_witness()
    ok = w["rule_defers"] and not w["bayes_defers"] and w["numerical_disagreement"]
    return Check("mixture-loss inconsistency witness", ok,
                 f"rule defers={w['rule_defers']}, bayes defers={w['bayes_defers']}")


def check_ranking_metrics(instances: int = 200, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst_roc = worst_pr = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 51))
        lab = rng.integers(0, 2, n)
        lab[0], lab[1] = 0, 1
        s = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4)))  # coarse rounding forces ties
        worst_roc = max(worst_roc, abs(auroc(s, lab) - brute_force_auroc(s, lab)))
        worst_pr = max(worst_pr, abs(aupr(s, lab) - enumerated_aupr(s, lab)))
    ok = worst_roc <= 1e-12 and worst_pr <= 1e-12
    return Check("AU-ROC / AU-PR oracles", ok, f"max |diff| roc {worst_roc:.1e}, pr {worst_pr:.1e}")


def check_coverage(n: int = 137, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    cp = rng.integers(0, 2, n)
    ep = rng.integers(0, 2, n)
    q = rng.normal(size=n)
    grid = np.arange(101) / 100
    curve = coverage_sweep(q, cp, ep, y, grid)
    counts_ok = curve.deferred_counts == [int(np.floor((1 - c) * n + 0.5 + 1e-9)) for c in grid]
    counts_ok &= all(deferral_count(c, n) == k for c, k in zip(grid, curve.deferred_counts))
    pts = dict(curve.points)
    ends_ok = pts[0.0] == np.mean(ep == y) and pts[1.0] == np.mean(cp == y)
    return Check("coverage exactness", bool(counts_ok and ends_ok),
                 f"101 grid points, endpoints expert={pts[0.0]:.4f} classifier={pts[1.0]:.4f}")


def run_verification_suite(grad_trials: int = 1000, grad_funcs: Optional[dict] = None, stream=None) -> list:
    """Run every check, print a pass/fail table and return the checks.

    ``grad_funcs`` swaps loss implementations inside the gradient check,
    which is how a planted fault is shown to be caught.
    """
    stream = sys.stdout if stream is None else stream
    checks = check_gradients(grad_trials, grad_funcs)
    bound, violn = check_upper_bound()
    bound.detail += f" (natural log: {violn} violations, informational)"
    checks += [bound, check_consistency(), check_witness(), check_ranking_metrics(), check_coverage()]
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}", file=stream)
    return checks
