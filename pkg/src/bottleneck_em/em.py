"""Standard EM in the Neal-Hinton form: responsibilities, statistics, M-step, restarts."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .data import Dataset, PriorSpec, prior_log_term, smooth_counts
from .inference import (
    DEFAULT_WIDTH_CAP,
    expected_log_joint,
    family_posteriors,
    log_marginals,
)
from .model import Cpt, Model, NetworkStructure, build_model
from .trace import RunTrace, TraceRecord

ROW_TOL = 1e-10


class Responsibilities:
    """Mean-field responsibilities: one ``(M, |T_i|)`` row-stochastic table per hidden variable.

    Tables are ordered like ``structure.hidden``.
    """

    def __init__(self, tables: Sequence[np.ndarray], check: bool = True):
        self.tables = tuple(np.array(t, dtype=float) for t in tables)
        for t in self.tables:
            t.setflags(write=False)
        if check:
            self.validate()

    def validate(self) -> None:
        Ms = {t.shape[0] for t in self.tables}
        if len(Ms) > 1:
            raise ValueError("all responsibility tables need the same number of rows")
        for k, t in enumerate(self.tables):
            if t.ndim != 2:
                raise ValueError(f"table {k} must be 2-D")
            if np.any(t < 0) or not np.all(np.isfinite(t)):
                raise ValueError(f"table {k} has negative or non-finite entries")
            if np.any(np.abs(t.sum(axis=1) - 1.0) > ROW_TOL):
                raise ValueError(f"table {k} has rows that do not sum to 1")

    @property
    def M(self) -> int:
        return self.tables[0].shape[0]

    def __len__(self):
        return len(self.tables)

    def __getitem__(self, i) -> np.ndarray:
        return self.tables[i]

    @cached_property
    def margins(self) -> tuple[np.ndarray, ...]:
        """Q(t_i) = (1/M) sum_y q[i][y][t]."""
        return tuple(t.mean(axis=0) for t in self.tables)

    def replace(self, i: int, table: np.ndarray, check: bool = False) -> "Responsibilities":
        tables = list(self.tables)
        tables[i] = table
        return Responsibilities(tables, check=check)

    def permuted(self, rows) -> "Responsibilities":
        return Responsibilities([t[np.asarray(rows)] for t in self.tables], check=False)


def random_responsibilities(structure: NetworkStructure, M: int, seed) -> Responsibilities:
    """Rows drawn as normalized unit-exponential vectors."""
    rng = np.random.default_rng(seed)
    tables = []
    for k in structure.hidden:
        e = rng.exponential(1.0, size=(M, structure.cards[k]))
        tables.append(e / e.sum(axis=1, keepdims=True))
    return Responsibilities(tables)


def uniform_responsibilities(structure: NetworkStructure, M: int) -> Responsibilities:
    return Responsibilities([np.full((M, structure.cards[k]), 1.0 / structure.cards[k])
                             for k in structure.hidden])


# ---------------------------------------------------------------------------
# sufficient statistics


@dataclass(frozen=True)
class ExpectedStats:
    """Per variable, expected counts over its family (tensor axes: parents..., child)."""

    structure: NetworkStructure
    counts: tuple[np.ndarray, ...]

    def total(self, k: int) -> float:
        return float(self.counts[k].sum())


def _mean_field_weights(structure: NetworkStructure, q: Responsibilities, M: int):
    qs = {v: q.tables[i] for i, v in enumerate(structure.hidden)}
    out = []
    for k in range(len(structure.variables)):
        hs = tuple(v for v in structure.family(k) if v in qs)
        if not hs:
            out.append(((), np.ones(M)))
            continue
        w = qs[hs[0]]
        for v in hs[1:]:
            w = w[..., None] * qs[v].reshape((M,) + (1,) * (w.ndim - 1) + (-1,))
        out.append((hs, w))
    return out


def accumulate_stats(structure: NetworkStructure, weights, obs: np.ndarray) -> ExpectedStats:
    """Expected family counts.

    ``weights`` is either :class:`Responsibilities` (mean-field: family weight is a
    product of per-variable rows) or the per-family exact posteriors returned by
    :func:`~bottleneck_em.inference.family_posteriors`.
    """
    obs = np.asarray(obs, dtype=np.int64)
    if isinstance(weights, Responsibilities):
        weights = _mean_field_weights(structure, weights, obs.shape[0])
    B = obs.shape[0]
    obs_col = {v: j for j, v in enumerate(structure.observed)}
    counts = []
    for k in range(len(structure.variables)):
        fam = structure.family(k)
        shape = structure.family_shape(k)
        hs, w = weights[k]
        obs_axes = [a for a, v in enumerate(fam) if v in obs_col]
        hid_axes = [a for a, v in enumerate(fam) if v not in obs_col]
        assert tuple(fam[a] for a in hid_axes) == tuple(hs)
        hid_size = int(np.prod([shape[a] for a in hid_axes], dtype=int))
        w2 = np.asarray(w, dtype=float).reshape(B, hid_size)
        if obs_axes:
            obs_shape = tuple(shape[a] for a in obs_axes)
            lin = np.ravel_multi_index(tuple(obs[:, obs_col[fam[a]]] for a in obs_axes), obs_shape)
            flat = np.zeros((int(np.prod(obs_shape)), hid_size))
            np.add.at(flat, lin, w2)
        else:
            obs_shape = ()
            flat = w2.sum(axis=0)[None, :]
        moved = flat.reshape(obs_shape + tuple(shape[a] for a in hid_axes))
        counts.append(np.moveaxis(moved, list(range(moved.ndim)), obs_axes + hid_axes))
    return ExpectedStats(structure, tuple(counts))


def m_step(stats: ExpectedStats, prior: PriorSpec) -> Model:
    """Plug-in MAP parameters: every CPT row is ``smooth_counts`` of its stats row."""
    s = stats.structure
    cpts = []
    for k, v in enumerate(s.variables):
        rows = stats.counts[k].reshape(-1, v.cardinality)
        cpts.append(Cpt(v.name, smooth_counts(rows, prior)))
    return build_model(s, cpts)


# ---------------------------------------------------------------------------
# functionals


def conditional_entropy(q: Responsibilities) -> float:
    """sum_i H(T_i | Y) under uniform Q(y), with 0 log 0 = 0."""
    total = 0.0
    for t in q.tables:
        with np.errstate(divide="ignore", invalid="ignore"):
            total -= float(np.where(t > 0, t * np.log(t), 0.0).sum()) / t.shape[0]
    return total


def em_functional(model: Model, q: Responsibilities, data: Dataset) -> float:
    """F[Q, P] = E_Q[log P(X, T)] + H_Q(T | Y), per instance (multiply by M for the total)."""
    obs = data.for_structure(model.structure)
    return float(np.mean(expected_log_joint(model, q, obs))) + conditional_entropy(q)


def penalty(model: Model, prior: PriorSpec, M: int) -> float:
    """Pseudo-count log-prior term scaled by 1/M, as added to per-instance objectives."""
    return prior_log_term(model.log_tensors, prior) / M


def train_log_likelihood(model: Model, data: Dataset, width_cap: int = DEFAULT_WIDTH_CAP) -> float:
    """Average log P(x[y]) over the dataset, in nats per instance."""
    return float(np.mean(log_marginals(model, data.for_structure(model.structure), width_cap)))


def _marginals_from_family(structure: NetworkStructure, posts) -> Responsibilities:
    tables = []
    for v in structure.hidden:
        hs, w = posts[v]
        axes = tuple(a + 1 for a, u in enumerate(hs) if u != v)
        tables.append(w.sum(axis=axes) if axes else w)
    tabs = [t / t.sum(axis=1, keepdims=True) for t in tables]
    return Responsibilities(tabs)


def e_step_exact(model: Model, data: Dataset, width_cap: int = DEFAULT_WIDTH_CAP) -> Responsibilities:
    """Exact posterior marginal of each hidden variable for every instance."""
    posts, _ = family_posteriors(model, data.for_structure(model.structure), width_cap)
    return _marginals_from_family(model.structure, posts)


# ---------------------------------------------------------------------------
# runs


@dataclass
class FitResult:
    model: Model
    q: Responsibilities
    trace: RunTrace
    converged: bool
    objective: float
    iterations: int = 0
    seed: object = None

    @property
    def train_ll(self) -> float:
        return self.trace[-1].train_ll


def _initial(structure: NetworkStructure, data: Dataset, init) -> Responsibilities:
    if isinstance(init, Responsibilities):
        if init.M != data.M:
            raise ValueError("init has the wrong number of rows")
        return init
    return random_responsibilities(structure, data.M, init)


def _mutual_info_total(q: Responsibilities) -> float:
    from .ibem import mutual_information

    return sum(mutual_information(q, i) for i in range(len(q)))


def run_em(structure: NetworkStructure, data: Dataset, init=0, prior: PriorSpec = PriorSpec(),
           tol: float = 1e-6, max_iters: int = 500,
           width_cap: int = DEFAULT_WIDTH_CAP) -> FitResult:
    """Exact EM from ``init`` (responsibilities or an RNG seed).

    The initial parameters are one M-step from the initial responsibilities.
    Record ``k`` of the trace holds the train log-likelihood of the k-th
    parameter set. As in every trace, ``objective`` is the quantity being
    minimized: here minus (log-likelihood + prior term / M), which EM never
    increases.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    obs = data.for_structure(structure)
    q0 = _initial(structure, data, init)
    model = m_step(accumulate_stats(structure, q0, obs), prior)
    if not structure.hidden:
        ll = train_log_likelihood(model, data, width_cap)
        obj = -(ll + penalty(model, prior, data.M))
        trace = RunTrace([TraceRecord(0, 1.0, -ll, obj, 0.0, ll, ll)])
        return FitResult(model, q0, trace, True, obj, 0, init)

    trace = RunTrace()
    posts, ll_rows = family_posteriors(model, obs, width_cap)
    q = _marginals_from_family(structure, posts)

    def record(step):
        ll = float(np.mean(ll_rows))
        obj = -(ll + penalty(model, prior, data.M))
        trace.append(TraceRecord(step, 1.0, -ll, obj, _mutual_info_total(q), ll, ll))
        return obj

    obj = record(0)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        model = m_step(accumulate_stats(structure, posts, obs), prior)
        posts, ll_rows = family_posteriors(model, obs, width_cap)
        q = _marginals_from_family(structure, posts)
        new_obj = record(it)
        if abs(new_obj - obj) < tol:
            converged = True
            obj = new_obj
            break
        obj = new_obj
    return FitResult(model, q, trace, converged, obj, it, init)


def run_mean_field_em(structure: NetworkStructure, data: Dataset, init=0,
                      prior: PriorSpec = PriorSpec(), tol: float = 1e-6,
                      max_iters: int = 500, width_cap: int = DEFAULT_WIDTH_CAP) -> FitResult:
    """Mean-field EM: the IB-EM fix-point solver with the tradeoff pinned at 1.

    ``tol`` applies to the change of the objective per round, like :func:`run_em`.
    """
    from .ibem import Problem, TradeoffState, solve_at_gamma

    problem = Problem(structure, data, prior, width_cap)
    q0 = _initial(structure, data, init)
    model = m_step(accumulate_stats(structure, q0, problem.obs), prior)
    history: list = []
    state = solve_at_gamma(TradeoffState(problem, 1.0, q0, model), tol=None,
                           max_rounds=max_iters, history=history, objective_tol=tol,
                           accelerate=False)
    trace = RunTrace()
    for k, st in enumerate(history):
        trace.append(TraceRecord(k, 1.0, st.lagrangian, st.objective, st.info, st.em_f,
                                 st.train_ll, residual=st.residual))
    return FitResult(state.model, state.q, trace, state.converged, state.objective,
                     state.rounds, init)


def _restart_job(args):
    structure, data, seed, k, prior, tol, max_iters, method = args
    fn = run_em if method == "em" else run_mean_field_em
    return fn(structure, data, init=[seed, k], prior=prior, tol=tol, max_iters=max_iters)


def restart_seed(seed: int, k: int) -> list[int]:
    return [seed, k]


def random_restarts(structure: NetworkStructure, data: Dataset, n: int, seed: int = 0,
                    prior: PriorSpec = PriorSpec(), tol: float = 1e-6, max_iters: int = 500,
                    method: str = "em", workers: int = 1) -> list[FitResult]:
    """``n`` runs from random starts, best train log-likelihood first.

    Run ``k`` is initialized with seed ``[seed, k]``; results do not depend on
    ``workers``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    jobs = [(structure, data, seed, k, prior, tol, max_iters, method) for k in range(n)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_restart_job, jobs))
    else:
        results = [_restart_job(j) for j in jobs]
    order = sorted(range(n), key=lambda k: (-results[k].train_ll, k))
    return [results[k] for k in order]


def percentile_below(values: Sequence[float], reference: float) -> float:
    """Percentage of ``values`` strictly below ``reference``."""
    values = list(values)
    return 100.0 * sum(v < reference for v in values) / len(values)


def percentile_value(values: Sequence[float], pct: float) -> float:
    """The value that ``pct`` percent of runs fall at or below (linear interpolation)."""
    return float(np.percentile(np.asarray(values, dtype=float), pct))
