"""Small numpy models, momentum SGD against the deferral losses,
temperature scaling, two-step alpha selection and the predict-or-defer path.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses as L
from .core import (
    MISSING,
    DeferralDataset,
    ExpertUnavailableError,
    InvalidInputError,
    TrainingDivergedError,
    log_softmax,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deferral-model"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# models


@dataclass
class DeferralModel:
    """Linear or one-hidden-layer ReLU network with ``n_out`` outputs.

    For the deferral losses ``n_out = K + 1`` and the last output is the
    deferral score. Inputs are affinely normalized by ``shift``/``scale``
    before the first layer (identity by default).
    """

    arch: str
    d: int
    n_out: int
    params: dict
    hidden: Optional[int] = None
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def _prep(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.d:
            raise InvalidInputError(f"expected {self.d} features, got {X.shape[1]}")
        if self.shift is not None:
            X = (X - self.shift) / self.scale
        return X

    def forward(self, X) -> np.ndarray:
        X = self._prep(X)
        p = self.params
        if self.arch == "linear":
            return X @ p["W"] + p["b"]
        H = np.maximum(X @ p["W1"] + p["b1"], 0.0)
        return H @ p["W2"] + p["b2"]

    def forward_backward(self, X, loss_grad: Callable[[np.ndarray], tuple]):
        """Run the model, hand scores to ``loss_grad`` and backpropagate.

        ``loss_grad(scores) -> (values, dscores)`` with per-example values.
        Returns ``(mean loss, param grads)``.
        """
        X = self._prep(X)
        n = X.shape[0]
        p = self.params
        if self.arch == "linear":
            S = X @ p["W"] + p["b"]
            values, dS = loss_grad(S)
            dS = dS / n
            return float(values.mean()), {"W": X.T @ dS, "b": dS.sum(axis=0)}
        Z = X @ p["W1"] + p["b1"]
        H = np.maximum(Z, 0.0)
        S = H @ p["W2"] + p["b2"]
        values, dS = loss_grad(S)
        dS = dS / n
        dH = dS @ p["W2"].T
        dZ = dH * (Z > 0)
        grads = {"W2": H.T @ dS, "b2": dS.sum(axis=0), "W1": X.T @ dZ, "b1": dZ.sum(axis=0)}
        return float(values.mean()), grads

    def copy(self) -> "DeferralModel":
        return copy.deepcopy(self)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    # -- checkpoints ------------------------------------------------------

    def to_dict(self) -> dict:
        def mat(a):
            a = np.asarray(a, dtype=float)
            return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}

        out = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": self.arch,
            "d": self.d,
            "n_out": self.n_out,
            "hidden": self.hidden,
            "params": {k: mat(v) for k, v in sorted(self.params.items())},
        }
        if self.shift is not None:
            out["shift"] = mat(self.shift)
            out["scale"] = mat(self.scale)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "DeferralModel":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInputError("not a deferral model checkpoint")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {obj.get('version')}")

        def arr(e):
            return np.asarray(e["data"], dtype=float).reshape(e["shape"])

        return cls(
            arch=obj["arch"], d=obj["d"], n_out=obj["n_out"], hidden=obj.get("hidden"),
            params={k: arr(v) for k, v in obj["params"].items()},
            shift=arr(obj["shift"]) if "shift" in obj else None,
            scale=arr(obj["scale"]) if "scale" in obj else None,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "DeferralModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_model(d: int, n_out: int, hidden: Optional[int], rng: np.random.Generator) -> DeferralModel:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialisation."""

    def layer(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)

    if hidden is None:
        W, b = layer(d, n_out)
        return DeferralModel("linear", d, n_out, {"W": W, "b": b})
    W1, b1 = layer(d, hidden)
    W2, b2 = layer(hidden, n_out)
    return DeferralModel("mlp", d, n_out, {"W1": W1, "b1": b1, "W2": W2, "b2": b2}, hidden=hidden)


def model_forward(model: DeferralModel, x) -> np.ndarray:
    """Scores for a single input (1-D) or a batch (2-D)."""
    x = np.asarray(x, dtype=float)
    out = model.forward(x)
    return out[0] if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Optimiser settings and loss selector.

    ``loss`` is one of ``lce`` (deferral cross entropy, weighted by
    ``alpha``), ``ce`` (plain K-class cross entropy), ``ce_defer`` (cross
    entropy over K+1 outputs, deferral never the target), ``cost_sensitive``
    (requires ``cost_fn``), ``lmix`` and ``lmix_blocked``.
    """

    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    loss: str = "lce"
    alpha: float = 1.0
    weight_decay: float = 0.0
    hidden: Optional[int] = None
    schedule: str = "constant"
    standardize: bool = False
    cost_fn: Optional[Callable[[DeferralDataset], np.ndarray]] = field(default=None, repr=False)

    def validate(self) -> None:
        if not self.lr >= 0:
            raise InvalidInputError("learning rate must be >= 0")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be >= 1")
        if self.loss not in OUTPUTS:
            raise InvalidInputError(f"unknown loss {self.loss!r}")
        if self.loss == "cost_sensitive" and self.cost_fn is None:
            raise InvalidInputError("cost_sensitive loss needs cost_fn")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise InvalidInputError("alpha must be finite and >= 0")


DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11)) + (2.0, 5.0)

OUTPUTS = {
    "lce": lambda K: K + 1,
    "ce": lambda K: K,
    "ce_defer": lambda K: K + 1,
    "cost_sensitive": lambda K: K + 1,
    "lmix": lambda K: K + 2,
    "lmix_blocked": lambda K: K + 2,
}


def _loss_closure(cfg: TrainConfig, data: DeferralDataset):
    """Per-batch ``loss_grad`` builder over the rows of ``data``."""
    K = data.K
    y = data.y
    if cfg.loss == "lce":
        agree = data.agree
        return lambda idx: (lambda S: L.lce_alpha_batch(S, y[idx], agree[idx], cfg.alpha))
    if cfg.loss in ("ce", "ce_defer"):
        return lambda idx: (lambda S: L.cross_entropy_batch(S, y[idx]))
    if cfg.loss == "cost_sensitive":
        C = np.asarray(cfg.cost_fn(data), dtype=float)
        return lambda idx: (lambda S: L.lce_cost_sensitive_batch(S, C[idx]))
    disagree = 1.0 - data.agree
    block = cfg.loss == "lmix_blocked"

    def make(idx):
        def f(S):
            v, dg, dr = L.lmix_batch(S[:, :K], S[:, K:], y[idx], disagree[idx], block)
            return v, np.concatenate([dg, dr], axis=1)

        return f

    return make


def _trainable(data: DeferralDataset, cfg: TrainConfig) -> DeferralDataset:
    keep = data.mask.copy()
    if cfg.loss in ("lce", "lmix", "lmix_blocked"):
        if data.m is None:
            raise InvalidInputError(f"loss {cfg.loss} needs expert labels")
        keep &= data.m != MISSING
    if not keep.any():
        raise InvalidInputError("no usable training examples")
    return data if keep.all() else data.subset(np.flatnonzero(keep))


def train_sgd(data: DeferralDataset, cfg: TrainConfig, init: Optional[DeferralModel] = None,
              history: Optional[list] = None) -> DeferralModel:
    """Minibatch momentum SGD; deterministic given ``cfg.seed``.

    ``init`` starts from a copy of an existing model (fine-tuning).
    ``history``, if given, receives the mean training loss of every epoch.
    """
    cfg.validate()
    data = _trainable(data, cfg)
    rng = np.random.default_rng(cfg.seed)
    n_out = OUTPUTS[cfg.loss](data.K)
    if init is not None:
        model = init.copy()
        if model.n_out != n_out or model.d != data.d:
            raise InvalidInputError("initial model shape does not match data/loss")
    else:
        model = init_model(data.d, n_out, cfg.hidden, rng)
        if cfg.standardize:
            mu = data.x.mean(axis=0)
            sd = data.x.std(axis=0)
            model.shift, model.scale = mu, np.where(sd > 0, sd, 1.0)
    closure = _loss_closure(cfg, data)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    n = len(data)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            value, grads = model.forward_backward(data.x[idx], closure(idx))
            if not np.isfinite(value):
                raise TrainingDivergedError(step, value)
            lr = cfg.lr
            if cfg.schedule == "cosine":
                lr = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))
            for k, g in grads.items():
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * model.params[k]
                velocity[k] = cfg.momentum * velocity[k] - lr * g
                model.params[k] = model.params[k] + velocity[k]
            if not model.is_finite():
                raise TrainingDivergedError(step, float("nan"))
            epoch_loss += value * len(idx)
            step += 1
        if history is not None:
            history.append(epoch_loss / n)
    return model


def dataset_loss(model: DeferralModel, data: DeferralDataset, cfg: TrainConfig) -> float:
    data = _trainable(data, cfg)
    value, _ = model.forward_backward(data.x, _loss_closure(cfg, data)(np.arange(len(data))))
    return value


# ---------------------------------------------------------------------------
# gradient checking


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        out.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


@dataclass
class GradCheckReport:
    loss: str
    trials: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _probe(loss: str, rng: np.random.Generator, funcs: dict):
    """One random probe: returns list of (analytic grad, numeric grad)."""
    K = int(rng.integers(2, 6))
    y = int(rng.integers(K))
    m = int(rng.integers(K))
    if loss.startswith("lce_alpha"):
        alpha = float(rng.uniform(0, 2)) if loss == "lce_alpha" else 1.0
        g = rng.normal(0, 2, K + 1)
        f = lambda z: funcs["lce"](z, y, m, alpha).value  # noqa: E731
        return [(funcs["lce"](g, y, m, alpha).grad, central_difference(f, g))]
    if loss == "lce_cost_sensitive":
        g = rng.normal(0, 2, K + 1)
        c = rng.uniform(0, 1, K + 1)
        f = lambda z: funcs["cs"](z, c).value  # noqa: E731
        return [(funcs["cs"](g, c).grad, central_difference(f, g))]
    if loss in ("lmix", "lmix_blocked"):
        block = loss == "lmix_blocked"
        g = rng.normal(0, 2, K)
        r = rng.normal(0, 2, 2)
        ev = funcs["lmix"](g, r, y, m, block)
        fr = lambda z: funcs["lmix"](g, z, y, m, block).value  # noqa: E731
        if block:
            # the classifier is trained on plain cross entropy
            fg = lambda z: float(L.cross_entropy_batch(z[None, :], np.array([y]))[0][0])  # noqa: E731
        else:
            fg = lambda z: funcs["lmix"](z, r, y, m, block).value  # noqa: E731
        return [(ev.grad, central_difference(fg, g)), (ev.rejector_grad, central_difference(fr, r))]
    if loss == "lsh":
        yb, mb = int(rng.choice([-1, 1])), int(rng.choice([-1, 1]))
        c = float(rng.uniform(0, 0.9))
        cx = float(rng.uniform(0.05, 0.95))
        alpha = float(rng.uniform(0.5, 2))
        z0 = rng.normal(0, 1, 2)
        f = lambda z: funcs["lsh"](z[0], z[1], yb, mb, c, cx, alpha).value  # noqa: E731
        return [(funcs["lsh"](z0[0], z0[1], yb, mb, c, cx, alpha).grad, central_difference(f, z0))]
    raise InvalidInputError(f"unknown loss {loss!r}")


GRAD_CHECK_LOSSES = ("lce_alpha1", "lce_alpha", "lce_cost_sensitive", "lmix", "lmix_blocked", "lsh")


def grad_check(loss: str, trials: int = 1000, seed: int = 0, tolerance: float = 1e-4,
               funcs: Optional[dict] = None) -> GradCheckReport:
    """Compare analytic gradients to central differences (step 1e-5).

    ``funcs`` overrides the loss implementations (used to plant faults).
    """
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    impl = {"lce": L.eval_lce_alpha, "cs": L.eval_lce_cost_sensitive, "lmix": L.eval_lmix,
            "lsh": L.eval_lsh_binary}
    impl.update(funcs or {})
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        for analytic, numeric in _probe(loss, rng, impl):
            worst = max(worst, _rel_err(np.asarray(analytic), numeric))
    return GradCheckReport(loss, trials, worst, tolerance)


# ---------------------------------------------------------------------------
# calibration


def _nll(logits: np.ndarray, labels: np.ndarray, T: float) -> float:
    lp = log_softmax(logits / T)
    return float(-lp[np.arange(len(labels)), labels].mean())


def temperature_scale(logits, labels, return_info: bool = False):
    """Fit a softmax temperature by minimising validation NLL.

    Log-spaced grid of 100 temperatures on [0.05, 10], then 30
    golden-section steps between the grid neighbours of the best point.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels, dtype=int).ravel()
    if logits.shape[0] == 0 or logits.shape[0] != labels.shape[0]:
        raise InvalidInputError("need matching, nonempty logits and labels")
    degenerate = np.unique(labels).size < 2
    if degenerate:
        warnings.warn("temperature fitted on single-class labels", RuntimeWarning, stacklevel=2)
    grid = np.logspace(np.log10(0.05), np.log10(10.0), 100)
    vals = np.array([_nll(logits, labels, t) for t in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    invphi = (math.sqrt(5) - 1) / 2
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = _nll(logits, labels, c), _nll(logits, labels, d)
    for _ in range(30):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = _nll(logits, labels, c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = _nll(logits, labels, d)
    T = float((lo + hi) / 2)
    if _nll(logits, labels, grid[i]) < _nll(logits, labels, T):
        T = float(grid[i])
    if return_info:
        return T, {"degenerate": degenerate, "nll": _nll(logits, labels, T)}
    return T


# ---------------------------------------------------------------------------
# deferral decisions


def defer_margin(scores: np.ndarray) -> np.ndarray:
    """``g_defer - max_y g_y`` per row; defer when it reaches the threshold."""
    S = np.atleast_2d(scores)
    return S[:, -1] - S[:, :-1].max(axis=1)


def system_predictions(model: DeferralModel, data: DeferralDataset, threshold: float = 0.0):
    """Classifier predictions, deferral mask and combined predictions."""
    S = model.forward(data.x)
    h = S[:, :-1].argmax(axis=1)
    deferred = defer_margin(S) >= threshold
    final = np.where(deferred, data.m, h)
    return h, deferred, final


def predict_or_defer(model: DeferralModel, x, expert: Callable[[], int], threshold: float = 0.0):
    """Predict with the classifier or query ``expert`` lazily.

    ``expert`` is a zero-argument callable; it is called only when the model
    defers. Returns ``(prediction, deferred)``.
    """
    g = model_forward(model, np.asarray(x, dtype=float))
    if g[-1] - np.max(g[:-1]) >= threshold:
        try:
            return int(expert()), True
        except ExpertUnavailableError:
            raise
        except Exception as exc:
            raise ExpertUnavailableError(str(exc)) from exc
    return int(np.argmax(g[:-1])), False


def best_threshold(q: np.ndarray, correct_clf: np.ndarray, correct_exp: np.ndarray):
    """Threshold on ``q`` maximising system accuracy.

    Candidates are every distinct value of ``q`` (defer ``q >= tau``) plus
    ``+inf`` (never defer). Among equal accuracies the larger threshold wins.
    Returns ``(tau, accuracy)``.
    """
    q = np.asarray(q, dtype=float)
    order = np.argsort(-q, kind="stable")
    qs = q[order]
    gain = (correct_exp.astype(float) - correct_clf.astype(float))[order]
    base = float(np.sum(correct_clf))
    cum = np.cumsum(gain)
    # last position of each distinct value in descending order
    ends = np.flatnonzero(np.r_[qs[1:] != qs[:-1], True])
    best_tau, best_acc = math.inf, base
    for e in ends:
        acc = base + cum[e]
        if acc > best_acc:
            best_tau, best_acc = float(qs[e]), acc
    return best_tau, best_acc / q.size


def select_alpha(train1: DeferralDataset, train2: DeferralDataset, val: DeferralDataset,
                 grid: Sequence[float], cfg: TrainConfig, finetune_cfg: Optional[TrainConfig] = None):
    """Two-step alpha selection.

    A base model is trained on ``train1`` with ``alpha = 1``; for each alpha
    a copy is fine-tuned on ``train2`` and the pair (alpha, threshold) with
    the best validation system accuracy is kept. Ties go to the smaller
    alpha. Returns ``(alpha, model, threshold)``.
    """
    grid = sorted(float(a) for a in grid)
    if not grid:
        raise InvalidInputError("alpha grid is empty")
    if not (train1.K == train2.K == val.K and train1.d == train2.d == val.d):
        raise InvalidInputError("datasets disagree on K or d")
    base = train_sgd(train1, replace(cfg, loss="lce", alpha=1.0))
    ft = finetune_cfg or cfg
    val = val.labeled()
    best = None
    for alpha in grid:
        model = train_sgd(train2, replace(ft, loss="lce", alpha=alpha), init=base)
        S = model.forward(val.x)
        q = defer_margin(S)
        correct_clf = S[:, :-1].argmax(axis=1) == val.y
        correct_exp = val.m == val.y
        tau, acc = best_threshold(q, correct_clf, correct_exp)
        log.debug("alpha=%g tau=%g val acc=%.4f", alpha, tau, acc)
        if best is None or acc > best[0]:
            best = (acc, alpha, model, tau)
    return best[1], best[2], best[3]
