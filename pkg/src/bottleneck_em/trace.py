"""Run traces and a minimal observer hook for solver events."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable

_observers: list[Callable[[str, dict], None]] = []


def subscribe(fn: Callable[[str, dict], None]) -> None:
    """Register ``fn(kind, payload)`` to receive solver events."""
    _observers.append(fn)


def unsubscribe(fn) -> None:
    if fn in _observers:
        _observers.remove(fn)


def emit(kind: str, **payload) -> None:
    for fn in list(_observers):
        fn(kind, payload)


@dataclass
class TraceRecord:
    step: int
    gamma: float
    lagrangian: float
    objective: float
    info: float
    em_f: float
    train_ll: float
    heldout_ll: float = math.nan
    inner_rounds: int = 0
    residual: float = math.nan
    perturbation_accepted: bool = False
    oscillated: bool = False


COLUMNS = [f.name for f in fields(TraceRecord)]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.9f}"


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, k):
        return self.records[k]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_tsv(self) -> str:
        lines = ["\t".join(COLUMNS)]
        for r in self.records:
            lines.append("\t".join(_fmt(getattr(r, c)) for c in COLUMNS))
        return "\n".join(lines) + "\n"
