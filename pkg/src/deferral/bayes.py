"""Population-level solutions on finite distributions and the numerical
consistency harness.

On a finite input space the expected surrogate is an exact finite sum and a
tabular model (free scores per point) ranges over all measurable functions,
so minimising it point by point gives the population minimiser.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .core import InvalidInputError, log_softmax, softmax_stable

NEAR_TIE = 1e-3
GRAD_TOL = 1e-6


@dataclass
class DistributionSpec:
    """Finite joint distribution: per point ``mass``, ``eta = P(Y|x)`` and
    ``pm = P(Y = M | x)``."""

    mass: np.ndarray
    eta: np.ndarray
    pm: np.ndarray

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float).ravel()
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        self.pm = np.asarray(self.pm, dtype=float).ravel()
        n = self.mass.size
        if n == 0 or self.eta.shape[0] != n or self.pm.size != n:
            raise InvalidInputError("mass, eta and pm must describe the same nonempty point set")
        if np.any(self.mass <= 0) or abs(self.mass.sum() - 1.0) > 1e-12:
            raise InvalidInputError("masses must be positive and sum to 1")
        if np.any(self.eta < 0) or np.any(np.abs(self.eta.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidInputError("each eta must be a probability vector")
        if np.any((self.pm < 0) | (self.pm > 1)):
            raise InvalidInputError("pm must lie in [0, 1]")

    @property
    def K(self) -> int:
        return self.eta.shape[1]

    def __len__(self) -> int:
        return self.mass.size


def random_distribution(rng: np.random.Generator, K: int, n_points: int = 10) -> DistributionSpec:
    mass = rng.dirichlet(np.ones(n_points))
    mass /= mass.sum()
    eta = rng.dirichlet(np.ones(K), size=n_points)
    eta /= eta.sum(axis=1, keepdims=True)
    pm = rng.uniform(0, 1, n_points)
    return DistributionSpec(mass, eta, pm)


def bayes_solution(dist: DistributionSpec):
    """Bayes classifier and rejector of the 0-1 system loss per point.

    ``h = argmax eta`` (lowest index on ties), defer iff ``max eta <= pm``.
    """
    h = dist.eta.argmax(axis=1)
    defer = dist.eta.max(axis=1) <= dist.pm
    return h, defer


def cost_sensitive_argmin(expected_costs) -> int:
    c = np.asarray(expected_costs, dtype=float)
    if c.size == 0 or not np.all(np.isfinite(c)):
        raise InvalidInputError("expected costs must be finite and nonempty")
    return int(np.argmin(c))


def lce_population_minimizer(eta, pm: float) -> np.ndarray:
    """Softmax of the population minimiser of the deferral cross entropy:
    ``(eta_1, ..., eta_K, pm) / (1 + pm)``."""
    eta = np.asarray(eta, dtype=float).ravel()
    return np.append(eta, pm) / (1.0 + pm)


def entropy(p) -> float:
    """Shannon entropy in nats; ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def lmix_population_rejector(eta, pm: float) -> bool:
    """Deferral rule minimising the expected mixture-of-experts loss:
    defer iff ``H(eta) >= P(Y != M | x)``."""
    return entropy(eta) >= 1.0 - pm


# ---------------------------------------------------------------------------
# expected surrogates at a single point


def _expected_lce(g: np.ndarray, eta: np.ndarray, pm: float):
    logp = log_softmax(g)
    w = np.append(eta, pm)
    value = -float(w @ logp)
    grad = w.sum() * np.exp(logp) - w
    return value, grad


def _expected_lmix(z: np.ndarray, eta: np.ndarray, pm: float):
    K = eta.size
    g, r = z[:K], z[K:]
    logp = log_softmax(g)
    ce = -float(eta @ logp)
    s = softmax_stable(r)
    value = ce * s[0] + (1.0 - pm) * s[1]
    dg = s[0] * (np.exp(logp) - eta)
    t = (ce - (1.0 - pm)) * s[0] * s[1]
    return value, np.concatenate([dg, [t, -t]])


def minimize_point(loss: str, eta, pm: float, max_iter: int = 5000):
    """Minimise the expected surrogate at one point. Returns ``(z, grad_norm)``."""
    eta = np.asarray(eta, dtype=float)
    K = eta.size
    if loss == "lce":
        fun, z0 = _expected_lce, np.zeros(K + 1)
    elif loss == "lmix":
        fun, z0 = _expected_lmix, np.zeros(K + 2)
    else:
        raise InvalidInputError(f"unknown loss {loss!r}")
    res = minimize(fun, z0, args=(eta, pm), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-12, "ftol": 1e-15})
    z = res.x
    if loss == "lce":
        # the objective is shift-invariant; center for readability
        z = z - z.mean()
    return z, float(np.linalg.norm(fun(z, eta, pm)[1]))


@dataclass
class ConsistencyReport:
    loss: str
    n_points: int
    n_compared: int
    n_agree_bayes: int
    excluded: list = field(default_factory=list)
    disagreements: list = field(default_factory=list)
    max_softmax_dev: float = 0.0
    n_agree_lmix_rule: int = 0
    n_compared_lmix_rule: int = 0
    max_grad_norm: float = 0.0
    converged: bool = True

    @property
    def agreement(self) -> float:
        return 1.0 if self.n_compared == 0 else self.n_agree_bayes / self.n_compared

    def to_json(self) -> str:
        d = asdict(self)
        d["agreement"] = self.agreement
        return json.dumps(d, indent=2, sort_keys=True)


def verify_consistency(dist: DistributionSpec, loss: str = "lce", max_iter: int = 5000,
                       grad_tol: float = GRAD_TOL, near_tie: float = NEAR_TIE) -> ConsistencyReport:
    """Minimise the exact expected surrogate with free per-point scores and
    compare the induced decisions with the Bayes solution.

    Points with ``|max eta - pm| < near_tie`` are excluded from the Bayes
    comparison. For ``lce`` the optimised softmax is also compared with
    :func:`lce_population_minimizer`; for ``lmix`` the decisions are also
    compared with :func:`lmix_population_rejector` away from its own tie
    band. The report's ``converged`` is False if any point's gradient norm
    exceeds ``grad_tol``.
    """
    h_b, r_b = bayes_solution(dist)
    rep = ConsistencyReport(loss=loss, n_points=len(dist), n_compared=0, n_agree_bayes=0)
    K = dist.K
    for i in range(len(dist)):
        eta, pm = dist.eta[i], float(dist.pm[i])
        z, gnorm = minimize_point(loss, eta, pm, max_iter)
        rep.max_grad_norm = max(rep.max_grad_norm, gnorm)
        if loss == "lce":
            h = int(np.argmax(z[:K]))
            defer = bool(z[K] >= z[:K].max())
            dev = float(np.max(np.abs(softmax_stable(z) - lce_population_minimizer(eta, pm))))
            rep.max_softmax_dev = max(rep.max_softmax_dev, dev)
        else:
            h = int(np.argmax(z[:K]))
            defer = bool(z[K + 1] > z[K])
            if abs(_entropy_gap(eta, pm)) >= near_tie:
                rep.n_compared_lmix_rule += 1
                rep.n_agree_lmix_rule += int(defer == lmix_population_rejector(eta, pm))
        if abs(eta.max() - pm) < near_tie:
            rep.excluded.append(i)
            continue
        rep.n_compared += 1
        top2 = np.sort(eta)[-2:] if K > 1 else np.array([0.0, 1.0])
        class_tie = top2[1] - top2[0] < near_tie
        same = defer == bool(r_b[i]) and (class_tie or h == int(h_b[i]))
        if same:
            rep.n_agree_bayes += 1
        else:
            rep.disagreements.append(i)
    rep.converged = rep.max_grad_norm <= grad_tol
    return rep


def _entropy_gap(eta, pm) -> float:
    return entropy(eta) - (1.0 - pm)
