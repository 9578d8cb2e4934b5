"""Discrete Bayesian networks: structure, conditional probability tables, sampling.

A CPT is stored as a 2-D array with one row per joint parent configuration.
Rows are ordered as a mixed-radix number over the parents in declared order,
most significant parent first, which is exactly C-order reshaping of a tensor
with axes ``(parent_1, ..., parent_k, child)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

OBSERVED = "observed"
HIDDEN = "hidden"

_ROW_TOL = 1e-12
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class ModelError(ValueError):
    """Raised when a structure, table or assignment is invalid."""


@dataclass(frozen=True)
class VariableSpec:
    name: str
    cardinality: int
    role: str = OBSERVED
    states: tuple[str, ...] | None = None

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ModelError(f"invalid variable name {self.name!r}")
        if self.role not in (OBSERVED, HIDDEN):
            raise ModelError(f"variable {self.name}: unknown role {self.role!r}")
        if self.cardinality < 1:
            raise ModelError(f"variable {self.name}: cardinality must be positive")
        if self.role == HIDDEN and self.cardinality < 2:
            raise ModelError(f"hidden variable {self.name}: cardinality must be >= 2")
        if self.states is not None and len(self.states) != self.cardinality:
            raise ModelError(
                f"variable {self.name}: {len(self.states)} state labels for "
                f"cardinality {self.cardinality}"
            )

    @property
    def hidden(self) -> bool:
        return self.role == HIDDEN

    @property
    def labels(self) -> tuple[str, ...]:
        if self.states is not None:
            return self.states
        return tuple(str(k) for k in range(self.cardinality))


@dataclass(frozen=True)
class NetworkStructure:
    """Variables plus, for each variable, the ordered names of its parents."""

    variables: tuple[VariableSpec, ...]
    parents: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "parents", tuple(tuple(p) for p in self.parents))
        if len(self.variables) != len(self.parents):
            raise ModelError("one parent list per variable is required")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ModelError("variable names must be unique")
        index = {n: k for k, n in enumerate(names)}
        for v, pa in zip(self.variables, self.parents):
            if len(set(pa)) != len(pa):
                raise ModelError(f"variable {v.name}: duplicate parent")
            for p in pa:
                if p not in index:
                    raise ModelError(f"variable {v.name}: unknown parent {p!r}")
                if p == v.name:
                    raise ModelError(f"cycle detected: {v.name} is its own parent")
        self.topological_order()  # raises on cycles

    @cached_property
    def index(self) -> dict[str, int]:
        return {v.name: k for k, v in enumerate(self.variables)}

    @cached_property
    def parent_idx(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(self.index[p] for p in pa) for pa in self.parents)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def cards(self) -> tuple[int, ...]:
        return tuple(v.cardinality for v in self.variables)

    @cached_property
    def hidden(self) -> tuple[int, ...]:
        """Indices of hidden variables, in declaration order."""
        return tuple(k for k, v in enumerate(self.variables) if v.hidden)

    @cached_property
    def observed(self) -> tuple[int, ...]:
        return tuple(k for k, v in enumerate(self.variables) if not v.hidden)

    def family(self, k: int) -> tuple[int, ...]:
        """Variable indices of family ``k`` in table-axis order: parents, then child."""
        return self.parent_idx[k] + (k,)

    def family_shape(self, k: int) -> tuple[int, ...]:
        cards = self.cards
        return tuple(cards[j] for j in self.family(k))

    def topological_order(self) -> list[int]:
        n = len(self.variables)
        pidx = self.parent_idx
        indeg = [len(p) for p in pidx]
        children: list[list[int]] = [[] for _ in range(n)]
        for k, pa in enumerate(pidx):
            for p in pa:
                children[p].append(k)
        ready = [k for k in range(n) if indeg[k] == 0]
        order = []
        while ready:
            k = ready.pop(0)
            order.append(k)
            for c in children[k]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != n:
            stuck = [self.variables[k].name for k in range(n) if indeg[k] > 0]
            raise ModelError(f"cycle detected among {', '.join(stuck)}")
        return order


@dataclass(frozen=True)
class Cpt:
    variable: str
    table: np.ndarray

    def __post_init__(self):
        table = np.array(self.table, dtype=float)
        if table.ndim == 1:
            table = table[None, :]
        table.setflags(write=False)
        object.__setattr__(self, "table", table)


@dataclass(frozen=True, eq=False)
class Model:
    """A validated Bayesian network. Build with :func:`build_model`."""

    structure: NetworkStructure
    cpts: tuple[Cpt, ...]

    @cached_property
    def log_tensors(self) -> tuple[np.ndarray, ...]:
        """Per variable, log CPT reshaped to ``family_shape`` (parents..., child)."""
        out = []
        with np.errstate(divide="ignore"):
            for k, cpt in enumerate(self.cpts):
                t = np.log(cpt.table).reshape(self.structure.family_shape(k))
                t.setflags(write=False)
                out.append(t)
        return tuple(out)

    def cpt(self, name: str) -> np.ndarray:
        return self.cpts[self.structure.index[name]].table

    def tensor(self, k: int) -> np.ndarray:
        return self.cpts[k].table.reshape(self.structure.family_shape(k))


def build_model(structure: NetworkStructure, cpts: Sequence[Cpt]) -> Model:
    """Validate CPTs against ``structure`` and return an immutable :class:`Model`.

    CPTs may be given in any order; they are matched to variables by name.
    """
    by_name: dict[str, Cpt] = {}
    for cpt in cpts:
        if cpt.variable not in structure.index:
            raise ModelError(f"CPT for unknown variable {cpt.variable!r}")
        if cpt.variable in by_name:
            raise ModelError(f"duplicate CPT for {cpt.variable}")
        by_name[cpt.variable] = cpt
    ordered = []
    for k, v in enumerate(structure.variables):
        if v.name not in by_name:
            raise ModelError(f"missing CPT for {v.name}")
        cpt = by_name[v.name]
        shape = structure.family_shape(k)
        rows = int(np.prod(shape[:-1], dtype=int))
        if cpt.table.shape != (rows, v.cardinality):
            raise ModelError(
                f"shape mismatch for {v.name}: expected {(rows, v.cardinality)}, "
                f"got {cpt.table.shape}"
            )
        if not np.all(np.isfinite(cpt.table)):
            raise ModelError(f"non-finite entry in CPT of {v.name}")
        if np.any(cpt.table < 0):
            r = int(np.argwhere(cpt.table < 0)[0][0])
            raise ModelError(f"negative entry in CPT of {v.name}, row {r}")
        sums = cpt.table.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > _ROW_TOL)
        if bad.size:
            raise ModelError(
                f"non-normalized row in CPT of {v.name}, row {int(bad[0])} "
                f"(sums to {sums[bad[0]]!r})"
            )
        ordered.append(cpt)
    return Model(structure, tuple(ordered))


def _assignment_vector(structure: NetworkStructure, assignment: Mapping[str, int]) -> list[int]:
    values = []
    for v in structure.variables:
        if v.name not in assignment:
            raise ModelError(f"missing variable {v.name} in assignment")
        s = int(assignment[v.name])
        if not 0 <= s < v.cardinality:
            raise ModelError(f"state {s} out of range for {v.name}")
        values.append(s)
    return values


def log_joint(model: Model, assignment: Mapping[str, int]) -> float:
    """Return log P(assignment) in nats; ``-inf`` when any factor is zero."""
    s = model.structure
    x = _assignment_vector(s, assignment)
    total = 0.0
    for k, cpt in enumerate(model.cpts):
        row = 0
        for p in s.parent_idx[k]:
            row = row * s.cards[p] + x[p]
        prob = cpt.table[row, x[k]]
        if prob == 0.0:
            return -math.inf
        total += math.log(prob)
    return total


def sample_assignments(model: Model, count: int, seed) -> np.ndarray:
    """Ancestral samples of every variable, shape ``(count, n_variables)``."""
    if count < 1:
        raise ModelError("count must be >= 1")
    s = model.structure
    rng = np.random.default_rng(seed)
    out = np.zeros((count, len(s.variables)), dtype=np.int64)
    for k in s.topological_order():
        row = np.zeros(count, dtype=np.int64)
        for p in s.parent_idx[k]:
            row = row * s.cards[p] + out[:, p]
        cdf = np.cumsum(model.cpts[k].table, axis=1)[row]
        u = rng.random(count)
        state = (u[:, None] >= cdf).sum(axis=1)
        out[:, k] = np.minimum(state, s.cards[k] - 1)
    return out


def sample_dataset(model: Model, count: int, seed):
    """Draw ``count`` instances by ancestral sampling; hidden columns are dropped."""
    from .data import Dataset

    full = sample_assignments(model, count, seed)
    obs = list(model.structure.observed)
    specs = tuple(model.structure.variables[k] for k in obs)
    return Dataset(specs, full[:, obs])


# ---------------------------------------------------------------------------
# presets and random parameters


def naive_bayes(leaves: int, card: int, leaf_card: int = 2) -> NetworkStructure:
    """Hidden ``T`` with ``card`` states as sole parent of ``leaves`` observed leaves."""
    vs = [VariableSpec("T", card, HIDDEN)]
    vs += [VariableSpec(f"X{j}", leaf_card) for j in range(leaves)]
    parents = [()] + [("T",)] * leaves
    return NetworkStructure(tuple(vs), tuple(parents))


def hierarchy(levels: int, card: int, leaves_per_block: int = 4, leaf_card: int = 2,
              branching: int = 4) -> NetworkStructure:
    """Tree of hidden variables with observed leaves.

    ``levels=3``: a root over ``branching`` hidden blocks, each over
    ``leaves_per_block`` observed leaves. ``levels=4`` adds an intermediate
    hidden layer (root, 4, 16 hidden variables for the default branching).
    """
    if levels < 2:
        raise ModelError("hierarchy needs at least 2 levels")
    vs: list[VariableSpec] = []
    parents: list[tuple[str, ...]] = []
    frontier = [("H0", ())]
    vs.append(VariableSpec("H0", card, HIDDEN))
    parents.append(())
    counter = 1
    for _ in range(levels - 2):
        nxt = []
        for name, _pa in frontier:
            for _b in range(branching):
                child = f"H{counter}"
                counter += 1
                vs.append(VariableSpec(child, card, HIDDEN))
                parents.append((name,))
                nxt.append((child, (name,)))
        frontier = nxt
    leaf = 0
    for name, _pa in frontier:
        for _b in range(leaves_per_block):
            vs.append(VariableSpec(f"X{leaf}", leaf_card))
            parents.append((name,))
            leaf += 1
    return NetworkStructure(tuple(vs), tuple(parents))


def random_model(structure: NetworkStructure, seed, concentration: float = 1.0) -> Model:
    """Model whose CPT rows are Dirichlet(concentration) draws."""
    rng = np.random.default_rng(seed)
    cpts = []
    for k, v in enumerate(structure.variables):
        rows = int(np.prod(structure.family_shape(k)[:-1], dtype=int))
        table = rng.dirichlet(np.full(v.cardinality, concentration), size=rows)
        table = np.maximum(table, 1e-300)
        table /= table.sum(axis=1, keepdims=True)
        cpts.append(Cpt(v.name, table))
    return build_model(structure, cpts)


# ---------------------------------------------------------------------------
# file formats


def format_structure(structure: NetworkStructure) -> str:
    lines = []
    for v, pa in zip(structure.variables, structure.parents):
        fields = [v.name, str(v.cardinality), v.role, ",".join(pa)]
        if v.states is not None:
            fields.append("states=" + ",".join(v.states))
        lines.append(" ".join(fields).rstrip())
    return "\n".join(lines) + "\n"


def parse_structure(text: str) -> NetworkStructure:
    """Parse ``name cardinality role parent1,parent2,...`` lines.

    An optional ``states=a,b,c`` token names the states. Blank lines and lines
    starting with ``#`` are ignored. File order must be a topological order.
    """
    variables: list[VariableSpec] = []
    parents: list[tuple[str, ...]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) < 3:
            raise ModelError(f"line {lineno}: expected 'name cardinality role [parents]'")
        name, card, role, *rest = tokens
        states = None
        pa: tuple[str, ...] = ()
        for tok in rest:
            if tok.startswith("states="):
                states = tuple(tok[len("states="):].split(","))
            elif pa:
                raise ModelError(f"line {lineno}: unexpected token {tok!r}")
            else:
                pa = tuple(p for p in tok.split(",") if p)
        try:
            card_i = int(card)
        except ValueError:
            raise ModelError(f"line {lineno}: cardinality {card!r} is not an integer") from None
        for p in pa:
            if p not in seen:
                raise ModelError(
                    f"line {lineno}: parent {p!r} of {name} not declared earlier "
                    "(file order must be topological)"
                )
        try:
            variables.append(VariableSpec(name, card_i, role, states))
        except ModelError as exc:
            raise ModelError(f"line {lineno}: {exc}") from None
        parents.append(pa)
        seen.add(name)
    if not variables:
        raise ModelError("structure file declares no variables")
    return NetworkStructure(tuple(variables), tuple(parents))


def format_cpts(model: Model) -> str:
    out = []
    for cpt in model.cpts:
        out.append(f"[{cpt.variable}]")
        for row in cpt.table:
            out.append(" ".join(repr(float(p)) for p in row))
    return "\n".join(out) + "\n"


def parse_cpts(text: str) -> list[Cpt]:
    """Parse ``[name]`` headers each followed by whitespace-separated rows."""
    cpts: list[Cpt] = []
    name = None
    rows: list[list[float]] = []

    def flush():
        if name is not None:
            if not rows:
                raise ModelError(f"CPT {name} has no rows")
            widths = {len(r) for r in rows}
            if len(widths) != 1:
                raise ModelError(f"CPT {name} has ragged rows")
            cpts.append(Cpt(name, np.array(rows)))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            flush()
            name, rows = line[1:-1].strip(), []
            continue
        if name is None:
            raise ModelError(f"line {lineno}: row before any [variable] header")
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError:
            raise ModelError(f"line {lineno}: non-numeric CPT entry") from None
    flush()
    return cpts


def save_model(model: Model, structure_path, cpt_path) -> None:
    Path(structure_path).write_text(format_structure(model.structure))
    Path(cpt_path).write_text(format_cpts(model))


def load_structure(path) -> NetworkStructure:
    return parse_structure(Path(path).read_text())


def load_model(structure_path, cpt_path) -> Model:
    structure = load_structure(structure_path)
    return build_model(structure, parse_cpts(Path(cpt_path).read_text()))
