"""The IB-EM Lagrangian and its fix-point solver at a fixed tradeoff gamma.

With Q(T|Y) factored over hidden variables the minimized quantity is

    L = sum_i I(T_i; Y) - gamma * (E_Q[log P(X, T)] - sum_i E_Q[log Q(T_i)])

which equals ``(1 - gamma) * I - gamma * F`` with F the Neal-Hinton functional.
The stationary rows satisfy

    Q(t_i | y) = Q(t_i)^(1 - gamma) * exp(gamma * EP(t_i, y)) / Z(i, y).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from . import trace
from .data import Dataset, PriorSpec
from .em import (
    Responsibilities,
    accumulate_stats,
    conditional_entropy,
    m_step,
    penalty,
)
from .inference import (
    DEFAULT_WIDTH_CAP,
    clamped_factors,
    expected_log_joint,
    expected_log_joint_table,
    log_marginals,
    logsumexp,
)
from .model import Model, NetworkStructure

MARGIN_FLOOR = 1e-12
OSCILLATION_TOL = 1e-6


class ZeroLikelihoodError(RuntimeError):
    """Every state of a hidden variable is impossible for some instance."""


class OscillationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class Problem:
    """What stays fixed while Q, P and gamma move: structure, data and prior."""

    structure: NetworkStructure
    data: Dataset
    prior: PriorSpec = PriorSpec()
    width_cap: int = DEFAULT_WIDTH_CAP

    @cached_property
    def obs(self) -> np.ndarray:
        return self.data.for_structure(self.structure)

    @property
    def M(self) -> int:
        return self.data.M

    def fit_model(self, q: Responsibilities) -> Model:
        """The optimal P for a given Q: one M-step."""
        return m_step(accumulate_stats(self.structure, q, self.obs), self.prior)


def mutual_information(q: Responsibilities, i: int) -> float:
    """I(T_i; Y) in nats under uniform Q(y), with 0 log 0 = 0."""
    t = np.asarray(q.tables[i])
    margin = t.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(t > 0, t * (np.log(t) - np.log(margin)), 0.0)
    return max(float(terms.sum()) / t.shape[0], 0.0)


def margin_neg_entropy(q: Responsibilities) -> float:
    """sum_i E_Q[log Q(T_i)]."""
    total = 0.0
    for m in q.margins:
        with np.errstate(divide="ignore", invalid="ignore"):
            total += float(np.where(m > 0, m * np.log(m), 0.0).sum())
    return total


@dataclass(frozen=True, eq=False)
class TradeoffState:
    """A point (Q, P, gamma); every metric derives from these and is cached."""

    problem: Problem
    gamma: float
    q: Responsibilities
    model: Model
    rounds: int = 0
    converged: bool = False
    oscillated: bool = False
    max_increase: float = -math.inf

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    @cached_property
    def factors(self):
        return clamped_factors(self.model, self.problem.structure.observed, self.problem.obs)

    @cached_property
    def info(self) -> float:
        return sum(mutual_information(self.q, i) for i in range(len(self.q)))

    @cached_property
    def expected_log_p(self) -> float:
        if not len(self.q):
            return float(np.mean(expected_log_joint(self.model, self.q, self.problem.obs,
                                                    self.factors)))
        # EP(t_0, y) already averages every family over the other variables
        q0 = np.asarray(self.q.tables[0])
        with np.errstate(invalid="ignore"):
            terms = np.where(q0 > 0, q0 * self.ep_table(0), 0.0)
        return float(np.mean(terms.sum(axis=1)))

    @cached_property
    def em_f(self) -> float:
        return self.expected_log_p + conditional_entropy(self.q)

    @cached_property
    def lagrangian(self) -> float:
        return self.info - self.gamma * (self.expected_log_p - margin_neg_entropy(self.q))

    @property
    def identity_value(self) -> float:
        """``(1 - gamma) I - gamma F``; equal to :attr:`lagrangian` by construction of F."""
        return (1.0 - self.gamma) * self.info - self.gamma * self.em_f

    @cached_property
    def objective(self) -> float:
        """The Lagrangian with the prior term; this is what the solver minimizes."""
        return self.lagrangian - self.gamma * penalty(self.model, self.problem.prior, self.problem.M)

    @cached_property
    def train_ll(self) -> float:
        lm = log_marginals(self.model, self.problem.obs, self.problem.width_cap)
        return float(np.mean(lm))

    @cached_property
    def residual(self) -> float:
        return residual_norm(self)

    @cached_property
    def _ep_cache(self) -> dict:
        return {}

    def ep_table(self, i: int, q: Responsibilities | None = None) -> np.ndarray:
        """EP(t_i, y) under this state's P, with responsibilities ``q`` (default: own)."""
        if q is None or q is self.q:
            if i not in self._ep_cache:
                self._ep_cache[i] = expected_log_joint_table(self.model, self.q, self.problem.obs,
                                                             i, self.factors)
            return self._ep_cache[i]
        return expected_log_joint_table(self.model, q, self.problem.obs, i, self.factors)


def initial_state(problem: Problem, gamma: float, q: Responsibilities) -> TradeoffState:
    return TradeoffState(problem, gamma, q, problem.fit_model(q))


def lagrangian(state: TradeoffState) -> float:
    return state.lagrangian


def _rhs_log(margin: np.ndarray, ep: np.ndarray, gamma: float) -> np.ndarray:
    """Unnormalized log of the fix-point right-hand side, shape ``(M, |T|)``."""
    lm = np.log(np.maximum(margin, MARGIN_FLOOR))
    if gamma == 0.0:
        return np.broadcast_to((1.0 - gamma) * lm, ep.shape).copy()
    with np.errstate(invalid="ignore"):
        scaled = np.where(np.isneginf(ep), -np.inf, gamma * ep)
    return (1.0 - gamma) * lm + scaled


def normalized_rhs_log(margin: np.ndarray, ep: np.ndarray, gamma: float) -> np.ndarray:
    """log of the normalized right-hand side; log Z is subtracted row-wise."""
    r = _rhs_log(margin, ep, gamma)
    z = logsumexp(r, axis=1)
    bad = np.flatnonzero(np.isneginf(z))
    if bad.size:
        raise ZeroLikelihoodError(f"instance {int(bad[0])} has zero likelihood")
    return r - z[:, None]


def fix_point_update(state: TradeoffState, i: int, q: Responsibilities | None = None) -> np.ndarray:
    """New rows for hidden variable ``i`` given margins and EP from ``q`` (default: state.q)."""
    q = state.q if q is None else q
    ep = state.ep_table(i, q)
    return np.exp(normalized_rhs_log(q.margins[i], ep, state.gamma))


def sweep(state: TradeoffState) -> Responsibilities:
    """Update each hidden variable in turn, each seeing the others' freshest rows."""
    q = state.q
    for i in range(len(q)):
        q = q.replace(i, fix_point_update(state, i, q))
    return q


def residual_norm(state: TradeoffState) -> float:
    """max |log q - log RHS| over all (i, y, t); zero exactly at fix-points."""
    worst = 0.0
    for i in range(len(state.q)):
        q = np.asarray(state.q.tables[i])
        rhs = normalized_rhs_log(state.q.margins[i], state.ep_table(i), state.gamma)
        with np.errstate(divide="ignore"):
            lq = np.log(q)
        both_zero = np.isneginf(lq) & np.isneginf(rhs)
        with np.errstate(invalid="ignore"):
            diff = np.where(both_zero, 0.0, np.abs(lq - rhs))
        worst = max(worst, float(np.max(diff)))
    return worst


def _plain_round(state: TradeoffState) -> TradeoffState:
    q = sweep(state)
    return TradeoffState(state.problem, state.gamma, q, state.problem.fit_model(q))


def _extrapolate(s0: TradeoffState, s1: TradeoffState, s2: TradeoffState) -> TradeoffState | None:
    """Squared-extrapolation (SQUAREM) point built from two plain rounds, in log-q space."""
    with np.errstate(divide="ignore"):
        logs = [[np.log(np.maximum(np.asarray(t), 1e-300)) for t in st.q.tables]
                for st in (s0, s1, s2)]
    r = [b - a for a, b in zip(logs[0], logs[1])]
    v = [c - 2 * b + a for a, b, c in zip(*logs)]
    nr = math.sqrt(sum(float(np.sum(x * x)) for x in r))
    nv = math.sqrt(sum(float(np.sum(x * x)) for x in v))
    if nv == 0.0 or nr == 0.0:
        return None
    alpha = -nr / nv
    if alpha >= -1.0:
        return None
    tables = []
    for a, ri, vi in zip(logs[0], r, v):
        lt = a - 2 * alpha * ri + alpha * alpha * vi
        lt -= logsumexp(lt, axis=1)[:, None]
        tables.append(np.exp(lt))
    q = Responsibilities(tables, check=False)
    return TradeoffState(s0.problem, s0.gamma, q, s0.problem.fit_model(q))


def solve_at_gamma(state: TradeoffState, tol: float | None = 1e-6, max_rounds: int = 2000,
                   history: list | None = None, objective_tol: float | None = None,
                   accelerate: bool = True) -> TradeoffState:
    """Alternate fix-point sweeps and M-steps until the residual drops below ``tol``.

    ``objective_tol`` optionally stops on a small change of the objective
    instead (used by mean-field EM). With ``accelerate`` every pair of plain
    rounds is followed by a squared-extrapolation trial that is kept only if
    one round from it ends no higher than the plain iterate, so the objective
    stays non-increasing round by round. A round that raises the objective by
    more than ``OSCILLATION_TOL`` aborts the solve with a warning; the best
    state seen is returned with ``oscillated=True``.
    """
    if tol is None and objective_tol is None:
        raise ValueError("need tol or objective_tol")
    if tol is not None and tol <= 0:
        raise ValueError("tol must be positive")
    gamma = state.gamma
    if history is not None:
        history.append(state)
    best = state
    max_inc = -math.inf
    rounds = 0
    status = {"converged": tol is not None and state.residual < tol, "oscillated": False}

    def advance(cur: TradeoffState, new: TradeoffState) -> TradeoffState:
        nonlocal best, max_inc, rounds
        rounds += 1
        inc = new.objective - cur.objective
        max_inc = max(max_inc, inc)
        trace.emit("round", gamma=gamma, increase=inc)
        if history is not None:
            history.append(new)
        if inc > OSCILLATION_TOL:
            warnings.warn(
                f"objective rose by {inc:.3g} at gamma={gamma:.6g} (round {rounds}); "
                "returning best state seen",
                OscillationWarning,
                stacklevel=3,
            )
            status["oscillated"] = True
            return new
        if new.objective < best.objective:
            best = new
        if objective_tol is not None and abs(inc) < objective_tol:
            status["converged"] = True
        elif tol is not None and new.residual < tol:
            status["converged"] = True
        return new

    def done() -> bool:
        return status["converged"] or status["oscillated"] or rounds >= max_rounds

    while not done():
        s0 = state
        state = advance(state, _plain_round(state))
        if done() or not accelerate:
            continue
        s1 = state
        state = advance(state, _plain_round(state))
        if done():
            continue
        ext = _extrapolate(s0, s1, state)
        if ext is None:
            continue
        trial = _plain_round(ext)
        if trial.objective <= state.objective:
            state = advance(state, trial)

    if status["oscillated"]:
        return replace(best, rounds=rounds, converged=False, oscillated=True,
                       max_increase=max_inc)
    out = replace(state, rounds=rounds, converged=status["converged"], max_increase=max_inc)
    if out.converged and tol is not None:
        trace.emit("converged", gamma=gamma, residual=out.residual, tol=tol, state=out)
    return out
