"""Synthetic generators, feature masking, CSV ingestion and splits."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .core import MISSING, DeferralDataset, InvalidInputError


class SchemaError(ValueError):
    pass


class CsvParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


# ---------------------------------------------------------------------------
# two-group Gaussian mixture


@dataclass
class GaussianMixtureConfig:
    d: int = 10
    n_train: int = 1000
    n_test: int = 1000
    seed: int = 0
    mean_range: tuple = (0.0, 10.0)
    var_range: tuple = (0.0, 10.0)

    def validate(self):
        if self.d < 1 or self.n_train < 1 or self.n_test < 1:
            raise InvalidInputError("d and sample counts must be >= 1")


@dataclass
class MixtureParams:
    """``means[y, a]`` and diagonal ``variances[y, a]`` plus ``P(A=1)``."""

    p_group1: float
    means: np.ndarray
    variances: np.ndarray


def draw_mixture_params(cfg: GaussianMixtureConfig, rng: np.random.Generator) -> MixtureParams:
    p1 = float(rng.uniform(0.0, 1.0))
    means = rng.uniform(*cfg.mean_range, size=(2, 2, cfg.d))
    variances = rng.uniform(*cfg.var_range, size=(2, 2, cfg.d))
    return MixtureParams(p1, means, variances)


def sample_mixture(params: MixtureParams, n: int, rng: np.random.Generator) -> DeferralDataset:
    a = (rng.uniform(size=n) < params.p_group1).astype(int)
    # P(Y=1 | A=a) = 0.5 in both groups
    y = (rng.uniform(size=n) < 0.5).astype(int)
    mu = params.means[y, a]
    sd = np.sqrt(params.variances[y, a])
    x = mu + sd * rng.standard_normal(mu.shape)
    return DeferralDataset(x=x, y=y, K=2, a=a)


def gen_gaussian_mixture(cfg: GaussianMixtureConfig):
    """One trial of the two-group mixture: ``(train, test)``.

    Both datasets carry the drawn :class:`MixtureParams` in ``info["params"]``;
    expert labels are attached separately.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = draw_mixture_params(cfg, rng)
    train = sample_mixture(params, cfg.n_train, rng)
    test = sample_mixture(params, cfg.n_test, rng)
    train.info["params"] = test.info["params"] = params
    return train, test


def gen_multiclass_blobs(n: int, K: int, d: int, rng: np.random.Generator, spread: float = 1.0,
                         center_scale: float = 2.0, centers: Optional[np.ndarray] = None):
    """Isotropic Gaussian blobs, one per class. Returns ``(dataset, centers)``."""
    if centers is None:
        centers = rng.normal(0.0, center_scale, size=(K, d))
    y = rng.integers(0, K, n)
    x = centers[y] + spread * rng.standard_normal((n, d))
    return DeferralDataset(x=x, y=y, K=K), centers


# ---------------------------------------------------------------------------
# corruption


def mask_features(data: DeferralDataset, mode: str, fraction: float, seed: int = 0) -> DeferralDataset:
    """Zero a contiguous block of ``floor(fraction * d)`` features.

    ``fixed_block`` always hides the leading coordinates; ``random_block``
    places the block uniformly at random per example.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInputError("fraction must lie in [0, 1]")
    if mode not in ("fixed_block", "random_block"):
        raise InvalidInputError(f"unknown mask mode {mode!r}")
    out = data.subset(np.arange(len(data)))
    d = data.d
    width = int(math.floor(fraction * d + 1e-12))
    if width == 0:
        return out
    x = out.x.copy()
    if mode == "fixed_block":
        x[:, :width] = 0.0
    else:
        rng = np.random.default_rng(seed)
        starts = rng.integers(0, d - width + 1, size=len(data))
        cols = starts[:, None] + np.arange(width)[None, :]
        x[np.arange(len(data))[:, None], cols] = 0.0
    out.x = x
    return out


# ---------------------------------------------------------------------------
# CSV


@dataclass
class CsvSchema:
    """Column mapping for :func:`load_dataset_csv`.

    ``missing`` marks an absent label; ``uncertain`` marks an uncertain one.
    Uncertain targets are masked like missing ones; for the expert column,
    ``uncertain_as_one`` maps them to class 1 instead of leaving them absent.
    """

    features: list
    label: str
    K: int
    expert: Optional[str] = None
    group: Optional[str] = None
    key: Optional[str] = None
    missing: str = ""
    uncertain: str = "U"
    uncertain_as_one: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _label(raw: str, schema: CsvSchema, line: int, col: str, expert: bool):
    raw = raw.strip()
    if raw == schema.missing or raw == schema.uncertain:
        if expert and raw == schema.uncertain and schema.uncertain_as_one:
            return 1
        return None
    try:
        v = float(raw)
    except ValueError:
        raise CsvParseError(line, f"column {col!r}: cannot parse {raw!r}") from None
    if v != int(v):
        raise CsvParseError(line, f"column {col!r}: label {raw!r} is not an integer")
    v = int(v)
    if not 0 <= v < schema.K:
        raise SchemaError(f"line {line}: column {col!r}: label {v} outside [0, {schema.K})")
    return v


def load_dataset_csv(path, schema: CsvSchema) -> DeferralDataset:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        need = list(schema.features) + [schema.label] + [
            c for c in (schema.expert, schema.group, schema.key) if c is not None]
        absent = [c for c in need if c not in header]
        if absent:
            raise SchemaError(f"header lacks columns {absent}")
        xs, ys, ms, as_, keys, mask = [], [], [], [], [], []
        for row in reader:
            line = reader.line_num
            if None in row or any(row[c] is None for c in need):
                raise CsvParseError(line, "wrong number of fields")
            try:
                xs.append([float(row[c]) for c in schema.features])
            except ValueError:
                raise CsvParseError(line, "non-numeric feature") from None
            y = _label(row[schema.label], schema, line, schema.label, expert=False)
            mask.append(y is not None)
            ys.append(0 if y is None else y)
            if schema.expert is not None:
                m = _label(row[schema.expert], schema, line, schema.expert, expert=True)
                ms.append(MISSING if m is None else m)
            if schema.group is not None:
                try:
                    as_.append(int(row[schema.group]))
                except ValueError:
                    raise CsvParseError(line, "non-integer group bit") from None
            if schema.key is not None:
                keys.append(row[schema.key])
    if not xs:
        raise InvalidInputError("CSV has no rows")
    return DeferralDataset(
        x=np.array(xs, dtype=float), y=ys, K=schema.K,
        m=ms if schema.expert is not None else None,
        a=as_ if schema.group is not None else None,
        mask=mask, keys=np.array(keys) if schema.key is not None else None,
    )


def save_dataset_csv(data: DeferralDataset, path, missing: str = "") -> CsvSchema:
    """Write ``data`` as CSV and return the schema that reads it back."""
    feats = [f"x{i}" for i in range(data.d)]
    schema = CsvSchema(features=feats, label="y", K=data.K, missing=missing,
                       expert="m" if data.m is not None else None,
                       group="a" if data.a is not None else None,
                       key="key" if data.keys is not None else None)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = feats + ["y"] + [c for c in (schema.expert, schema.group, schema.key) if c]
        w.writerow(header)
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.x[i]]
            row.append(str(int(data.y[i])) if data.mask[i] else missing)
            if data.m is not None:
                row.append(missing if data.m[i] == MISSING else str(int(data.m[i])))
            if data.a is not None:
                row.append(str(int(data.a[i])))
            if data.keys is not None:
                row.append(str(data.keys[i]))
            w.writerow(row)
    return schema


def write_manifest(data: DeferralDataset, path, schema: Optional[CsvSchema] = None, seed=None) -> dict:
    manifest = {"n": len(data), "d": data.d, "K": data.K, "seed": seed,
                "schema": schema.to_dict() if schema else None}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


# ---------------------------------------------------------------------------
# splits


def split_dataset(data: DeferralDataset, fractions: Sequence[float], seed: int = 0, by: str = "row",
                  keys=None) -> list:
    """Disjoint, exhaustive random split.

    With ``by="group-key"`` whole keys (``keys`` or ``data.keys``) are
    assigned to parts, so no key spans two parts; part sizes then follow the
    fractions in number of keys.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.size == 0 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise InvalidInputError("fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    if by == "row":
        units = np.arange(len(data))
        unit_of = units
    elif by == "group-key":
        keys = data.keys if keys is None else np.asarray(keys)
        if keys is None:
            raise InvalidInputError("group-key split needs keys")
        units, unit_of = np.unique(keys, return_inverse=True)
        units = np.arange(units.size)
    else:
        raise InvalidInputError(f"unknown split mode {by!r}")
    perm = rng.permutation(units.size)
    bounds = np.round(np.cumsum(fr) * units.size).astype(int)
    bounds[-1] = units.size
    parts, start = [], 0
    for i, b in enumerate(bounds):
        if b == start:
            raise InvalidInputError(f"part {i} of the split would be empty")
        chosen = np.zeros(units.size, dtype=bool)
        chosen[perm[start:b]] = True
        parts.append(data.subset(np.flatnonzero(chosen[unit_of])))
        start = b
    return parts
