"""Synthetic experts, learned expert-behaviour models and expert-label imputation."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import MISSING, DeferralDataset, Example, InvalidInputError, UndefinedMetricError, softmax_stable
from .evaluation import auroc, binary_rates

EXPERT_KINDS = ("k_perfect", "group_pq", "empirical_counts", "group1_bayes")


@dataclass
class ExpertSpec:
    """Parametric synthetic expert.

    * ``k_perfect``: correct on classes ``< k``, uniform over all ``K``
      classes otherwise.
    * ``group_pq``: correct with probability ``p`` when the group bit is 1
      and ``q`` otherwise; a wrong answer flips the label when ``K == 2``
      and is uniform over the other labels when ``K > 2``.
    * ``empirical_counts``: samples proportionally to per-example annotator
      counts (rows of ``counts`` aligned with the dataset).
    * ``group1_bayes``: the fixed linear rule ``I[w.x + b > 0]``.
    """

    kind: str
    K: int = 2
    k: int = 0
    p: float = 1.0
    q: float = 1.0
    counts: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    bias: float = 0.0

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise InvalidInputError(f"unknown expert kind {self.kind!r}")
        if not 0 <= self.k <= self.K:
            raise InvalidInputError("k must lie in [0, K]")
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise InvalidInputError("p and q must lie in [0, 1]")
        if self.kind == "group1_bayes" and self.weights is None:
            raise InvalidInputError("group1_bayes expert needs a hyperplane")


def _wrong_label(y: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    if K == 2:
        return 1 - y
    # uniform over the K-1 labels different from y
    shift = rng.integers(1, K, size=y.shape)
    return (y + shift) % K


def expert_predict_batch(spec: ExpertSpec, data: DeferralDataset, rng: np.random.Generator) -> np.ndarray:
    """Expert labels for every row of ``data``."""
    y = data.y
    n = len(data)
    if spec.kind == "k_perfect":
        guess = rng.integers(0, spec.K, n)
        return np.where(y < spec.k, y, guess)
    if spec.kind == "group_pq":
        if data.a is None:
            raise InvalidInputError("group_pq expert needs group bits")
        p_correct = np.where(data.a == 1, spec.p, spec.q)
        correct = rng.uniform(size=n) < p_correct
        return np.where(correct, y, _wrong_label(y, spec.K, rng))
    if spec.kind == "empirical_counts":
        if spec.counts is None or len(spec.counts) != n:
            raise InvalidInputError("empirical_counts expert needs one count vector per example")
        c = np.asarray(spec.counts, dtype=float)
        cdf = np.cumsum(c / c.sum(axis=1, keepdims=True), axis=1)
        u = rng.uniform(size=(n, 1))
        return np.minimum((u > cdf).sum(axis=1), spec.K - 1)
    w = np.asarray(spec.weights, dtype=float)
    return (data.x @ w + spec.bias > 0).astype(int)


def expert_predict(spec: ExpertSpec, example: Example, rng: np.random.Generator,
                   counts: Optional[np.ndarray] = None) -> int:
    """Single-example expert answer. ``counts`` feeds ``empirical_counts``."""
    if spec.kind == "group_pq" and example.a is None:
        raise InvalidInputError("group_pq expert needs the group bit")
    if spec.kind == "empirical_counts":
        if counts is None:
            raise InvalidInputError("empirical_counts expert needs a count vector")
        spec = replace(spec, counts=np.atleast_2d(counts))
    ds = DeferralDataset(x=np.atleast_2d(example.x), y=[example.y], K=spec.K,
                         a=None if example.a is None else [example.a])
    return int(expert_predict_batch(spec, ds, rng)[0])


def lda_hyperplane(mean0, mean1, var0, var1):
    """Equal-prior two-class linear discriminant with pooled diagonal covariance.

    Returns ``(w, b)``; class 1 is predicted when ``w.x + b > 0``.
    """
    mean0, mean1 = np.asarray(mean0, float), np.asarray(mean1, float)
    pooled = 0.5 * (np.asarray(var0, float) + np.asarray(var1, float))
    w = (mean1 - mean0) / pooled
    b = -0.5 * float(w @ (mean0 + mean1))
    return w, b


def group1_bayes_expert(params) -> ExpertSpec:
    """Expert that applies the group-1 discriminant to every input."""
    w, b = lda_hyperplane(params.means[0, 1], params.means[1, 1], params.variances[0, 1], params.variances[1, 1])
    return ExpertSpec("group1_bayes", K=2, weights=w, bias=b)


# ---------------------------------------------------------------------------
# expert behaviour models


BEHAVIOR_METHODS = ("ccn", "table_lookup", "logistic")


@dataclass
class ExpertBehaviorModel:
    """Per-task model of ``P(e_j = 1 | label vector)``.

    ``ccn[j, b]`` is the smoothed ``P(e_j=1 | y_j=b)``; ``table`` maps an
    observed label vector to its empirical probabilities (falling back to
    ``ccn`` for unseen vectors); ``logit_w``/``logit_b`` hold per-task
    logistic weights over the label vector.
    """

    method: str
    T: int
    ccn: np.ndarray
    table: dict = field(default_factory=dict)
    logit_w: Optional[np.ndarray] = None
    logit_b: Optional[np.ndarray] = None

    def predict_proba(self, Y) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=int))
        if Y.shape[1] != self.T:
            raise InvalidInputError(f"label vectors must have {self.T} entries")
        tasks = np.arange(self.T)
        if self.method == "ccn":
            return self.ccn[tasks[None, :], Y]
        if self.method == "logistic":
            z = Y @ self.logit_w + self.logit_b
            return 1.0 / (1.0 + np.exp(-z))
        out = self.ccn[tasks[None, :], Y].copy()
        for i, row in enumerate(Y):
            hit = self.table.get(tuple(int(v) for v in row))
            if hit is not None:
                out[i] = hit
        return out

    def to_dict(self) -> dict:
        obj = {"method": self.method, "T": self.T, "ccn": self.ccn.tolist()}
        if self.table:
            obj["table"] = [{"labels": list(k), "p": v.tolist()} for k, v in sorted(self.table.items())]
        if self.logit_w is not None:
            obj["logit_w"] = self.logit_w.tolist()
            obj["logit_b"] = self.logit_b.tolist()
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "ExpertBehaviorModel":
        table = {tuple(e["labels"]): np.asarray(e["p"], dtype=float) for e in obj.get("table", [])}
        w = obj.get("logit_w")
        return cls(obj["method"], obj["T"], np.asarray(obj["ccn"], dtype=float), table,
                   None if w is None else np.asarray(w, dtype=float),
                   None if w is None else np.asarray(obj["logit_b"], dtype=float))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ExpertBehaviorModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _fit_ccn(Y: np.ndarray, E: np.ndarray) -> np.ndarray:
    T = Y.shape[1]
    ccn = np.empty((T, 2))
    for b in (0, 1):
        sel = Y == b
        ccn[:, b] = ((E * sel).sum(axis=0) + 1.0) / (sel.sum(axis=0) + 2.0)
    return ccn


def fit_expert_model(method: str, Y, E, epochs: int = 200, lr: float = 0.1, seed: int = 0) -> ExpertBehaviorModel:
    """Fit an expert-behaviour model from ``(label vector, expert vector)`` pairs.

    CCN uses add-one smoothing. The table stores raw frequencies per observed
    label vector. The logistic model is trained per task with full-batch
    gradient descent on the cross entropy.
    """
    if method not in BEHAVIOR_METHODS:
        raise InvalidInputError(f"unknown expert model {method!r}")
    Y = np.atleast_2d(np.asarray(Y, dtype=int))
    E = np.atleast_2d(np.asarray(E, dtype=int))
    if Y.size == 0 or Y.shape != E.shape:
        raise InvalidInputError("need matching, nonempty label and expert arrays")
    if np.any((Y < 0) | (Y > 1)) or np.any((E < 0) | (E > 1)):
        raise InvalidInputError("label and expert vectors must be binary")
    T = Y.shape[1]
    model = ExpertBehaviorModel(method, T, _fit_ccn(Y, E))
    if method == "table_lookup":
        keys, inv = np.unique(Y, axis=0, return_inverse=True)
        inv = inv.ravel()
        for i, key in enumerate(keys):
            rows = inv == i
            model.table[tuple(int(v) for v in key)] = E[rows].mean(axis=0)
    elif method == "logistic":
        rng = np.random.default_rng(seed)
        X = Y.astype(float)
        W = rng.normal(0, 0.01, (T, T))
        b = np.zeros(T)
        n = X.shape[0]
        for _ in range(epochs):
            P = 1.0 / (1.0 + np.exp(-(X @ W + b)))
            G = (P - E) / n
            W -= lr * (X.T @ G)
            b -= lr * G.sum(axis=0)
        model.logit_w, model.logit_b = W, b
    return model


def expert_model_sample(model: ExpertBehaviorModel, Y, rng: np.random.Generator) -> np.ndarray:
    """Independent per-task Bernoulli expert decisions for each label vector."""
    P = model.predict_proba(Y)
    out = (rng.uniform(size=P.shape) < P).astype(int)
    return out[0] if np.asarray(Y).ndim == 1 else out


def _f1(pred: np.ndarray, y: np.ndarray) -> Optional[float]:
    r = binary_rates(pred, y)
    return r["f1"]


def evaluate_expert_model(model: ExpertBehaviorModel, Y, E, rng: np.random.Generator) -> list:
    """Per-task quality of a behaviour model on held-out annotations.

    ``auroc`` scores the model's probability at predicting the expert's
    decision (None when the held-out decisions are single-class); ``d_fpr``,
    ``d_tpr`` and ``d_f1`` are absolute differences between the performance
    against the target of a sampled model expert and of the real one.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=int))
    E = np.atleast_2d(np.asarray(E, dtype=int))
    if Y.shape[0] == 0:
        raise InvalidInputError("held-out set is empty")
    P = model.predict_proba(Y)
    S = expert_model_sample(model, Y, rng)
    out = []
    for j in range(model.T):
        try:
            auc = auroc(P[:, j], E[:, j])
        except UndefinedMetricError:
            auc = None
        real = binary_rates(E[:, j], Y[:, j])
        fake = binary_rates(S[:, j], Y[:, j])

        def diff(key):
            if real[key] is None or fake[key] is None:
                return None
            return abs(real[key] - fake[key])

        out.append({"task": j, "auroc": auc, "d_fpr": diff("fpr"), "d_tpr": diff("tpr"), "d_f1": diff("f1")})
    return out


def _summary(vals):
    v = np.array([x for x in vals if x is not None], dtype=float)
    if v.size == 0:
        return {"mean": None, "q25": None, "q75": None, "n": 0}
    return {"mean": float(v.mean()), "q25": float(np.quantile(v, 0.25)),
            "q75": float(np.quantile(v, 0.75)), "n": int(v.size)}


def expert_model_trials(method: str, Y, E, n_train: int = 400, n_test: int = 100, trials: int = 50,
                        seed: int = 0) -> list:
    """Repeated random train/test splits; per-task mean and (25, 75) quantiles."""
    Y = np.asarray(Y, dtype=int)
    E = np.asarray(E, dtype=int)
    if n_train + n_test > Y.shape[0]:
        raise InvalidInputError("not enough annotations for the requested split")
    rng = np.random.default_rng(seed)
    per_trial = []
    for t in range(trials):
        perm = rng.permutation(Y.shape[0])
        tr, te = perm[:n_train], perm[n_train:n_train + n_test]
        model = fit_expert_model(method, Y[tr], E[tr], seed=seed + t)
        per_trial.append(evaluate_expert_model(model, Y[te], E[te], rng))
    T = Y.shape[1]
    return [{"task": j, **{k: _summary([r[j][k] for r in per_trial]) for k in ("auroc", "d_fpr", "d_tpr", "d_f1")}}
            for j in range(T)]


def load_annotations_csv(path):
    """Read ``task_1..task_T`` and ``e_1..e_T`` columns into ``(Y, E)``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        tasks = sorted((c for c in header if c.startswith("task_")), key=lambda c: int(c.split("_")[1]))
        exps = [f"e_{c.split('_')[1]}" for c in tasks]
        if not tasks or any(c not in header for c in exps):
            raise InvalidInputError("annotation CSV needs task_j and e_j columns")
        Y, E = [], []
        for row in reader:
            try:
                Y.append([int(row[c]) for c in tasks])
                E.append([int(row[c]) for c in exps])
            except (TypeError, ValueError):
                raise InvalidInputError(f"line {reader.line_num}: malformed annotation row") from None
    return np.array(Y, dtype=int), np.array(E, dtype=int)


def save_annotations_csv(path, Y, E) -> None:
    Y, E = np.asarray(Y, dtype=int), np.asarray(E, dtype=int)
    T = Y.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"task_{j + 1}" for j in range(T)] + [f"e_{j + 1}" for j in range(T)])
        for yr, er in zip(Y, E):
            w.writerow(list(yr) + list(er))


# ---------------------------------------------------------------------------
# imputation


def disagreement_placeholder(y: np.ndarray, K: int) -> np.ndarray:
    """Lowest class index different from ``y``."""
    y = np.asarray(y, dtype=int)
    return np.where(y == 0, 1, 0) if K > 1 else y


def impute_expert_agreement(labeled: DeferralDataset, unlabeled: DeferralDataset, cfg):
    """Fill in expert labels for ``unlabeled`` from a learned agreement model.

    A binary classifier of ``I[y == m]`` is trained on ``labeled``; each
    unlabeled example gets ``m = y`` when it predicts agreement and the
    lowest label different from ``y`` otherwise. Only ``I[m == y]`` enters
    the deferral loss, so the placeholder choice is immaterial. Returns the
    union, labeled rows first, with ``info["imputed"]`` marking the new rows.
    """
    from .optim import train_sgd  # local: optim imports evaluation too

    lab = labeled.labeled()
    if lab.m is None or np.any(lab.m == MISSING):
        raise InvalidInputError("labeled set needs expert labels on every example")
    target = (lab.m == lab.y).astype(int)
    if target.min() == target.max():
        warnings.warn("agreement labels are single-class; imputation is constant", RuntimeWarning, stacklevel=2)
        agree = np.full(len(unlabeled), bool(target[0]))
    else:
        f_m = train_sgd(DeferralDataset(x=lab.x, y=target, K=2), replace(cfg, loss="ce"))
        agree = softmax_stable(f_m.forward(unlabeled.x))[:, 1] >= 0.5
    m_new = np.where(agree, unlabeled.y, disagreement_placeholder(unlabeled.y, unlabeled.K))
    opt = lambda u, v: None if u is None or v is None else np.concatenate([u, v])  # noqa: E731
    union = DeferralDataset(
        x=np.vstack([labeled.x, unlabeled.x]), y=np.concatenate([labeled.y, unlabeled.y]), K=labeled.K,
        m=np.concatenate([labeled.m, m_new]), a=opt(labeled.a, unlabeled.a),
        mask=np.concatenate([labeled.mask, unlabeled.mask]),
    )
    union.info["imputed"] = np.r_[np.zeros(len(labeled), bool), np.ones(len(unlabeled), bool)]
    return union
