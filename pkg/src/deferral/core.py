"""Shared numeric primitives and dataset types.

Score layout used everywhere: a model emits ``K + 1`` scores per input, the
first ``K`` are class scores and the last one is the deferral score.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np


class InvalidInputError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step} (loss={value})")
        self.step = step
        self.value = value


class ExpertUnavailableError(RuntimeError):
    pass


def _finite(a: np.ndarray, what: str = "scores") -> np.ndarray:
    if a.size == 0:
        raise InvalidInputError(f"empty {what}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"non-finite {what}")
    return a


def logsumexp(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    mx = np.max(s, axis=axis, keepdims=True)
    out = mx + np.log(np.sum(np.exp(s - mx), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return s - np.expand_dims(logsumexp(s, axis=axis), axis)


def softmax_stable(scores) -> np.ndarray:
    """Softmax along the last axis, shifted by the row maximum."""
    s = _finite(np.asarray(scores, dtype=float))
    z = np.exp(s - np.max(s, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def argmax_tiebreak(scores) -> int:
    """Index of the maximum; ties go to the lowest index."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise InvalidInputError("empty scores")
    # np.argmax returns the first occurrence
    return int(np.argmax(s))


@dataclass(frozen=True)
class ScoreVector:
    """``K`` class scores followed by the deferral score."""

    scores: np.ndarray

    def __post_init__(self):
        s = _finite(np.asarray(self.scores, dtype=float).ravel())
        if s.size < 2:
            raise InvalidInputError("a ScoreVector needs at least one class score and a deferral score")
        object.__setattr__(self, "scores", s)

    @property
    def K(self) -> int:
        return self.scores.size - 1

    @property
    def class_scores(self) -> np.ndarray:
        return self.scores[:-1]

    @property
    def defer_score(self) -> float:
        return float(self.scores[-1])

    def __array__(self, dtype=None, copy=None):
        return self.scores if dtype is None else self.scores.astype(dtype)


def as_scores(g) -> np.ndarray:
    if isinstance(g, ScoreVector):
        return g.scores
    return ScoreVector(g).scores


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: int
    m: Optional[int] = None
    a: Optional[int] = None


MISSING = -1


@dataclass
class DeferralDataset:
    """Column-oriented dataset of ``(x, y, m, a)`` tuples.

    ``m`` and ``a`` are optional; inside the arrays a value of ``MISSING``
    (-1) marks an absent expert label. ``mask`` is False for examples whose
    target is missing for this task; they are kept but ignored by training
    and evaluation.
    """

    x: np.ndarray
    y: np.ndarray
    K: int
    m: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    keys: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=int).ravel()
        n = self.x.shape[0]
        if n == 0:
            raise InvalidInputError("dataset is empty")
        if self.y.shape[0] != n:
            raise InvalidInputError("x and y lengths differ")
        if self.K < 1:
            raise InvalidInputError("K must be >= 1")
        if self.mask is None:
            self.mask = np.ones(n, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).ravel()
        if np.any((self.y[self.mask] < 0) | (self.y[self.mask] >= self.K)):
            raise InvalidInputError(f"labels must lie in [0, {self.K})")
        if self.m is not None:
            self.m = np.asarray(self.m, dtype=int).ravel()
            have = self.m != MISSING
            if np.any((self.m[have] < 0) | (self.m[have] >= self.K)):
                raise InvalidInputError(f"expert labels must lie in [0, {self.K})")
        if self.a is not None:
            self.a = np.asarray(self.a, dtype=int).ravel()
        if self.keys is not None:
            self.keys = np.asarray(self.keys).ravel()
        for name in ("m", "a", "mask", "keys"):
            v = getattr(self, name)
            if v is not None and v.shape[0] != n:
                raise InvalidInputError(f"{name} length differs from x")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def agree(self) -> np.ndarray:
        """``I[m == y]`` per example (requires expert labels)."""
        if self.m is None:
            raise InvalidInputError("dataset has no expert labels")
        return (self.m == self.y).astype(float)

    def subset(self, idx) -> "DeferralDataset":
        idx = np.asarray(idx)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return DeferralDataset(
            x=self.x[idx], y=self.y[idx], K=self.K, m=pick(self.m), a=pick(self.a),
            mask=self.mask[idx], keys=pick(self.keys), info=dict(self.info),
        )

    def labeled(self) -> "DeferralDataset":
        """Drop examples whose target is masked out."""
        return self.subset(np.flatnonzero(self.mask))

    def with_expert(self, m) -> "DeferralDataset":
        out = self.subset(np.arange(len(self)))
        out.m = np.asarray(m, dtype=int).ravel()
        out.__post_init__()
        return out

    def examples(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield Example(
                x=self.x[i], y=int(self.y[i]),
                m=None if self.m is None or self.m[i] == MISSING else int(self.m[i]),
                a=None if self.a is None else int(self.a[i]),
            )

    @classmethod
    def from_examples(cls, examples, K: int) -> "DeferralDataset":
        examples = list(examples)
        if not examples:
            raise InvalidInputError("dataset is empty")
        x = np.stack([np.asarray(e.x, dtype=float) for e in examples])
        y = [e.y for e in examples]
        m = None
        if any(e.m is not None for e in examples):
            m = [MISSING if e.m is None else e.m for e in examples]
        a = None
        if any(e.a is not None for e in examples):
            if any(e.a is None for e in examples):
                raise InvalidInputError("group bit present on some examples only")
            a = [e.a for e in examples]
        return cls(x=x, y=y, K=K, m=m, a=a)

    def equals(self, other: "DeferralDataset", atol: float = 0.0) -> bool:
        if self.K != other.K or self.x.shape != other.x.shape:
            return False
        if not np.allclose(self.x, other.x, rtol=0, atol=atol):
            return False
        for name in ("y", "m", "a", "mask"):
            u, v = getattr(self, name), getattr(other, name)
            if (u is None) != (v is None):
                return False
            if u is not None and not np.array_equal(u, v):
                return False
        return True
