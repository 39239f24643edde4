"""System and surrogate losses for learning to defer.

Every loss returns its value together with the analytic gradient with
respect to the scores. The ``*_batch`` kernels operate on ``(n, ·)`` score
matrices and are what the trainers use; the ``eval_*`` functions are the
single-example entry points.

Losses are evaluated through ``log_softmax`` so no probability is formed
before taking its logarithm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import InvalidInputError, _finite, as_scores, log_softmax, softmax_stable


@dataclass(frozen=True)
class LossEval:
    value: float
    grad: np.ndarray
    rejector_grad: Optional[np.ndarray] = None


def _log_scale(log_base: Optional[float]) -> float:
    if log_base is None or log_base == math.e:
        return 1.0
    if log_base <= 0 or log_base == 1:
        raise InvalidInputError("log_base must be positive and != 1")
    return 1.0 / math.log(log_base)


def _check_class(v: int, K: int, name: str) -> int:
    v = int(v)
    if not 0 <= v < K:
        raise InvalidInputError(f"{name}={v} outside [0, {K})")
    return v


# ---------------------------------------------------------------------------
# system loss


def defers(g) -> bool:
    """Rejector of a score vector: defer iff ``g_defer >= max_y g_y``."""
    g = as_scores(g)
    return bool(g[-1] >= np.max(g[:-1]))


def eval_loss_01(g, y: int, m: int) -> float:
    """0-1 system loss of the classifier/rejector pair encoded by ``g``.

    A tie between the deferral score and the best class score counts as a
    deferral.
    """
    g = as_scores(g)
    K = g.size - 1
    y = _check_class(y, K, "y")
    m = _check_class(m, K, "m")
    if defers(g):
        return float(m != y)
    return float(int(np.argmax(g[:-1])) != y)


def loss_01_batch(G: np.ndarray, y: np.ndarray, m: np.ndarray) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    defer = G[:, -1] >= G[:, :-1].max(axis=1)
    h = G[:, :-1].argmax(axis=1)
    return np.where(defer, m != y, h != y).astype(float)


# ---------------------------------------------------------------------------
# cross-entropy surrogate with deferral class


def lce_alpha_batch(G, y, agree, alpha: float = 1.0, log_base: Optional[float] = None):
    """Per-example ``L_CE^alpha`` values and score gradients.

    ``agree`` is ``I[m == y]`` as floats. Returns ``(values, grads)`` with
    shapes ``(n,)`` and ``(n, K + 1)``.
    """
    G = np.asarray(G, dtype=float)
    y = np.asarray(y, dtype=int)
    agree = np.asarray(agree, dtype=float)
    n = G.shape[0]
    rows = np.arange(n)
    logp = log_softmax(G)
    w = alpha * agree + (1.0 - agree)
    values = -w * logp[rows, y] - agree * logp[:, -1]
    p = np.exp(logp)
    grads = (w + agree)[:, None] * p
    grads[rows, y] -= w
    grads[:, -1] -= agree
    scale = _log_scale(log_base)
    return values * scale, grads * scale


def eval_lce_alpha(g, y: int, m: int, alpha: float = 1.0, log_base: Optional[float] = None) -> LossEval:
    """``-(alpha I[m=y] + I[m!=y]) log p_y - I[m=y] log p_defer``.

    ``alpha=1`` is the plain deferral cross entropy. ``log_base`` defaults to
    the natural logarithm; with ``log_base=2`` the loss is measured in bits,
    the scale on which it dominates the 0-1 system loss.
    """
    g = as_scores(g)
    K = g.size - 1
    y = _check_class(y, K, "y")
    m = _check_class(m, K, "m")
    if not (np.isfinite(alpha) and alpha >= 0):
        raise InvalidInputError("alpha must be finite and >= 0")
    v, dg = lce_alpha_batch(g[None, :], np.array([y]), np.array([float(m == y)]), alpha, log_base)
    return LossEval(float(v[0]), dg[0])


def lce_cost_sensitive_batch(G, C):
    G = np.asarray(G, dtype=float)
    C = np.asarray(C, dtype=float)
    W = C.max(axis=1, keepdims=True) - C
    logp = log_softmax(G)
    values = -np.sum(W * logp, axis=1)
    grads = W.sum(axis=1, keepdims=True) * np.exp(logp) - W
    return values, grads


def eval_lce_cost_sensitive(g, costs) -> LossEval:
    """Cost-sensitive cross entropy: weights ``max_j c_j - c_i`` on ``-log p_i``."""
    g = as_scores(g)
    c = _finite(np.asarray(costs, dtype=float).ravel(), "costs")
    if c.shape != g.shape:
        raise InvalidInputError("cost vector length must match the score vector")
    if np.any(c < 0):
        raise InvalidInputError("costs must be non-negative")
    v, dg = lce_cost_sensitive_batch(g[None, :], c[None, :])
    return LossEval(float(v[0]), dg[0])


def deferral_costs(y: int, m: int, K: int) -> np.ndarray:
    """Cost vector of the 0-1 system loss: misclassification, then expert error."""
    c = np.ones(K + 1)
    c[y] = 0.0
    c[K] = float(m != y)
    return c


# ---------------------------------------------------------------------------
# mixture-of-experts loss


def lmix_batch(Gc, R, y, disagree, block_gradient: bool = False):
    """Per-example mixture-of-experts loss.

    ``Gc`` holds the ``K`` class scores, ``R`` the two gate scores
    ``(predict, defer)``. With ``block_gradient`` the classifier receives the
    plain cross-entropy gradient instead of the gate-weighted one, i.e. the
    gate does not backpropagate into the classifier.
    """
    Gc = np.asarray(Gc, dtype=float)
    R = np.asarray(R, dtype=float)
    y = np.asarray(y, dtype=int)
    disagree = np.asarray(disagree, dtype=float)
    rows = np.arange(Gc.shape[0])
    logp = log_softmax(Gc)
    ce = -logp[rows, y]
    s = softmax_stable(R)
    values = ce * s[:, 0] + disagree * s[:, 1]
    dce = np.exp(logp)
    dce[rows, y] -= 1.0
    dGc = dce if block_gradient else s[:, :1] * dce
    t = (ce - disagree) * s[:, 0] * s[:, 1]
    dR = np.stack([t, -t], axis=1)
    return values, dGc, dR


def eval_lmix(g_class, r_pair, y: int, m: int, block_gradient: bool = False) -> LossEval:
    gc = _finite(np.asarray(g_class, dtype=float).ravel())
    r = _finite(np.asarray(r_pair, dtype=float).ravel(), "gate scores")
    if r.size != 2:
        raise InvalidInputError("gate needs exactly two scores")
    K = gc.size
    y = _check_class(y, K, "y")
    m = _check_class(m, K, "m")
    v, dg, dr = lmix_batch(gc[None, :], r[None, :], np.array([y]), np.array([float(m != y)]), block_gradient)
    return LossEval(float(v[0]), dg[0], dr[0])


def cross_entropy_batch(G, y):
    G = np.asarray(G, dtype=float)
    rows = np.arange(G.shape[0])
    logp = log_softmax(G)
    grads = np.exp(logp)
    grads[rows, y] -= 1.0
    return -logp[rows, y], grads


# ---------------------------------------------------------------------------
# binary exponential surrogate


def sh_beta(cx: float) -> float:
    if not 0.0 < cx < 1.0:
        raise InvalidInputError("c(x) must lie in (0, 1)")
    return math.sqrt((1.0 - cx) / cx)


def expert_cost_rate(c: float, p_disagree) -> np.ndarray:
    """``c(x) = c - c P(Y!=M|x) + P(Y!=M|x)``, the plug-in used to set beta."""
    p = np.asarray(p_disagree, dtype=float)
    return c - c * p + p


def eval_lsh_binary(h: float, r: float, y: int, m: int, c: float, cx: float, alpha: float = 1.0) -> LossEval:
    """Binary exponential surrogate with data-dependent ``beta``.

    Labels are in ``{-1, +1}``; the rejector defers when ``r <= 0``. The
    returned gradient is ``(d/dh, d/dr)``.
    """
    if y not in (-1, 1) or m not in (-1, 1):
        raise InvalidInputError("binary labels must be -1 or +1")
    if not 0.0 <= c < 1.0:
        raise InvalidInputError("c must lie in [0, 1)")
    beta = sh_beta(cx)
    cost = c + float(m != y)
    a = math.exp(0.5 * alpha * (r - h * y))
    b = cost * math.exp(-beta * r)
    grad = np.array([-0.5 * alpha * y * a, 0.5 * alpha * a - beta * b])
    return LossEval(a + b, grad)


def lsh_batch(h, r, y, m, c: float, cx, alpha: float = 1.0):
    h, r, y, m = (np.asarray(v, dtype=float) for v in (h, r, y, m))
    cx = np.asarray(cx, dtype=float)
    if np.any((cx <= 0) | (cx >= 1)):
        raise InvalidInputError("c(x) must lie in (0, 1)")
    beta = np.sqrt((1.0 - cx) / cx)
    cost = c + (m != y)
    a = np.exp(0.5 * alpha * (r - h * y))
    b = cost * np.exp(-beta * r)
    return a + b, -0.5 * alpha * y * a, 0.5 * alpha * a - beta * b
