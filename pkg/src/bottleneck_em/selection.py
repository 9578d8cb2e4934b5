"""Cross-validated choice of the early-stopping tradeoff and the final fit."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .continuation import ContinuationConfig, run_continuation
from .data import Dataset, PriorSpec, kfold_indices
from .em import FitResult
from .inference import DEFAULT_WIDTH_CAP
from .model import NetworkStructure

GRID_POINTS = 101


def default_grid() -> np.ndarray:
    return np.linspace(0.0, 1.0, GRID_POINTS)


@dataclass(frozen=True)
class CvCurve:
    """Held-out log-likelihood per instance on a fixed gamma grid, per fold and averaged."""

    grid: np.ndarray
    folds: np.ndarray  # (k, len(grid))

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        folds = np.atleast_2d(np.asarray(self.folds, dtype=float))
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError("grid must be a non-empty vector")
        if grid[0] < 0 or grid[-1] > 1 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must increase within [0, 1]")
        if folds.shape[1] != grid.size:
            raise ValueError("fold curves do not match the grid")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "folds", folds)

    @property
    def k(self) -> int:
        return self.folds.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.folds.mean(axis=0)

    @property
    def best_index(self) -> int:
        # argmax returns the first maximum, i.e. the smallest gamma on ties
        return int(np.argmax(self.mean))

    @property
    def gamma_star(self) -> float:
        return float(self.grid[self.best_index])

    def to_tsv(self) -> str:
        head = ["gamma", "mean_heldout_ll"] + [f"fold{j}" for j in range(self.k)]
        lines = ["\t".join(head)]
        mean = self.mean
        for g in range(self.grid.size):
            row = [self.grid[g], mean[g], *self.folds[:, g]]
            lines.append("\t".join(f"{v:.9f}" for v in row))
        lines.append(f"# gamma_star\t{self.gamma_star:.9f}")
        return "\n".join(lines) + "\n"


def checkpoints_to_grid(gammas, values, grid) -> np.ndarray:
    """Map checkpoint values to the nearest grid point, carrying the last one forward.

    Checkpoints must be in visiting order (nondecreasing gamma). Grid points
    before the first checkpoint take its value.
    """
    gammas = np.asarray(gammas, dtype=float)
    values = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if gammas.size == 0:
        raise ValueError("no checkpoints")
    nearest = np.abs(grid[None, :] - gammas[:, None]).argmin(axis=1)
    out = np.full(grid.size, np.nan)
    for idx, v in zip(nearest, values):
        out[idx] = v
    last = values[0]
    for g in range(grid.size):
        if np.isnan(out[g]):
            out[g] = last
        else:
            last = out[g]
    return out


def _missing_states(structure: NetworkStructure, train: Dataset) -> list[str]:
    obs = train.for_structure(structure)
    out = []
    for col, v in enumerate(structure.observed):
        missing = structure.cards[v] - np.unique(obs[:, col]).size
        if missing:
            out.append(f"{structure.names[v]} ({missing})")
    return out


def _fold_job(args):
    structure, train, held, config, prior, width_cap, grid = args
    fit = run_continuation(structure, train, config, prior, heldout=held, width_cap=width_cap)
    return checkpoints_to_grid(fit.trace.column("gamma"), fit.trace.column("heldout_ll"), grid)


def cross_validate_gamma(structure: NetworkStructure, data: Dataset, k: int = 5,
                         config: ContinuationConfig = ContinuationConfig(),
                         prior: PriorSpec = PriorSpec(), seed: int = 0, workers: int = 1,
                         width_cap: int = DEFAULT_WIDTH_CAP) -> CvCurve:
    """Run the continuation on each of ``k`` training parts and score the held-out part.

    Only ``data`` is read; pass the training split, never the test split.
    Folds run to gamma = 1 regardless of ``config.gamma_stop``.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if data.M < k:
        raise ValueError(f"k={k} exceeds the number of instances ({data.M})")
    grid = default_grid()
    config = replace(config, gamma_stop=1.0)
    jobs, gaps = [], []
    for j, te in enumerate(kfold_indices(data.M, k, seed)):
        train = data.subset(np.setdiff1d(np.arange(data.M), te))
        gaps += [f"fold {j}: {m}" for m in _missing_states(structure, train)]
        jobs.append((structure, train, data.subset(te), config, prior, width_cap, grid))
    if gaps:
        warnings.warn(
            "training parts miss some observed states (variable, count missing); the prior "
            "covers the empty CPT rows: " + ", ".join(gaps),
            RuntimeWarning,
            stacklevel=2,
        )
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            curves = list(ex.map(_fold_job, jobs))
    else:
        curves = [_fold_job(job) for job in jobs]
    return CvCurve(grid, np.stack(curves))


def final_fit(structure: NetworkStructure, data: Dataset, gamma_star: float,
              config: ContinuationConfig = ContinuationConfig(),
              prior: PriorSpec = PriorSpec(), heldout: Dataset | None = None,
              width_cap: int = DEFAULT_WIDTH_CAP) -> FitResult:
    """The continuation on all of ``data``, stopped at ``gamma_star``."""
    if not 0.0 < gamma_star <= 1.0:
        raise ValueError(f"gamma_star must lie in (0, 1], got {gamma_star}")
    return run_continuation(structure, data, replace(config, gamma_stop=gamma_star), prior,
                            heldout=heldout, width_cap=width_cap)
