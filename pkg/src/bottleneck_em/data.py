"""Datasets, the instance-identity view of data, discretization and priors.

Row ``y`` of a :class:`Dataset` *is* instance ``y``: the identity variable Y
ranges over row indices and carries uniform weight 1/M.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import NetworkStructure, VariableSpec

_LABEL_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

DOWN, SAME, UP = "down", "same", "up"


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Fully observed instances over the observed variables of a network.

    Attributes:
        variables: specs of the observed columns, in column order.
        values: integer state matrix of shape ``(M, len(variables))``.
    """

    variables: tuple[VariableSpec, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != len(self.variables):
            raise DataError("values must have one column per variable")
        if values.shape[0] == 0:
            raise DataError("empty dataset")
        for j, v in enumerate(self.variables):
            col = values[:, j]
            if col.min() < 0 or col.max() >= v.cardinality:
                raise DataError(f"state out of range in column {v.name}")
        values.setflags(write=False)
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "values", values)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.variables, self.values[np.asarray(rows)])

    def for_structure(self, structure: NetworkStructure) -> np.ndarray:
        """Columns reordered to ``structure.observed``; shape ``(M, n_observed)``."""
        names = self.names
        cols = []
        for k in structure.observed:
            v = structure.variables[k]
            if v.name not in names:
                raise DataError(f"dataset has no column for observed variable {v.name}")
            j = names.index(v.name)
            if self.variables[j].cardinality != v.cardinality:
                raise DataError(f"cardinality mismatch for {v.name}")
            cols.append(j)
        return self.values[:, cols]


@dataclass(frozen=True)
class PriorSpec:
    """Symmetric pseudo-count prior: ``pseudo_count`` imaginary instances per CPT row."""

    pseudo_count: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.pseudo_count) or self.pseudo_count < 0:
            raise DataError("pseudo_count must be a finite nonnegative number")


def smooth_counts(counts, prior: PriorSpec) -> np.ndarray:
    """MAP row estimate ``(n_k + a/K) / (sum(n) + a)``.

    Works on the last axis, so a whole count table can be smoothed at once.
    Rows with zero total mass and no prior come back uniform.
    """
    counts = np.asarray(counts, dtype=float)
    if not np.all(np.isfinite(counts)):
        raise DataError("counts must be finite")
    k = counts.shape[-1]
    a = float(prior.pseudo_count)
    num = counts + a / k
    den = num.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0 / k)
    return out


def prior_log_term(log_tensors: Sequence[np.ndarray], prior: PriorSpec) -> float:
    """Sum over all CPT cells of ``(a/K) * log theta``: the pseudo-count likelihood."""
    a = float(prior.pseudo_count)
    if a == 0.0:
        return 0.0
    total = 0.0
    for t in log_tensors:
        total += (a / t.shape[-1]) * float(t.sum())
    return total


# ---------------------------------------------------------------------------
# discretization


def discretize_equal_bins(values, bins: int) -> np.ndarray:
    """Map reals to ``bins`` equal-width bins over ``[min, max]``; max goes to the last bin."""
    x = np.asarray(values, dtype=float)
    if bins < 2:
        raise DataError("bins must be >= 2")
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise DataError("values must be finite and non-empty")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        raise DataError("constant column: zero range")
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def discretize_std_threshold(values) -> np.ndarray:
    """Label each value down/same/up relative to mean -/+ one population std."""
    x = np.asarray(values, dtype=float)
    if np.unique(x).size < 2:
        raise DataError("constant column")
    mu, sd = x.mean(), x.std()
    out = np.full(x.shape, SAME, dtype=object)
    out[x < mu - sd] = DOWN
    out[x > mu + sd] = UP
    return out


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, structure: NetworkStructure) -> Dataset:
    """Read a header-plus-rows CSV whose cells are state labels."""
    specs = {structure.variables[k].name: structure.variables[k] for k in structure.observed}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty dataset") from None
        header = [h.strip() for h in header]
        for h in header:
            if h not in specs:
                raise DataError(f"unknown column {h!r}")
        if len(set(header)) != len(header):
            raise DataError("duplicate column in header")
        missing = [n for n in specs if n not in header]
        if missing:
            raise DataError(f"missing column(s): {', '.join(missing)}")
        lookup = [{lab: s for s, lab in enumerate(specs[h].labels)} for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: ragged row ({len(row)} cells, expected {len(header)})")
            parsed = []
            for j, cell in enumerate(row):
                cell = cell.strip()
                if cell not in lookup[j]:
                    raise DataError(f"line {lineno}: unknown state label {cell!r} for {header[j]}")
                parsed.append(lookup[j][cell])
            rows.append(parsed)
    if not rows:
        raise DataError("empty dataset")
    return Dataset(tuple(specs[h] for h in header), np.array(rows, dtype=np.int64))


def write_csv(dataset: Dataset, path) -> None:
    for v in dataset.variables:
        for lab in v.labels:
            if not _LABEL_RE.match(lab):
                raise DataError(f"label {lab!r} of {v.name} is not CSV-safe")
    lines = [",".join(dataset.names)]
    labels = [v.labels for v in dataset.variables]
    for row in dataset.values:
        lines.append(",".join(labels[j][s] for j, s in enumerate(row)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def kfold_indices(M: int, k: int, seed) -> list[np.ndarray]:
    """Seeded partition of ``range(M)`` into ``k`` held-out folds."""
    if k < 2 or M < k:
        raise DataError(f"need 2 <= k <= M, got k={k}, M={M}")
    perm = np.random.default_rng(seed).permutation(M)
    return [np.sort(f) for f in np.array_split(perm, k)]
