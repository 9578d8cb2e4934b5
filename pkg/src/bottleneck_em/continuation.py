"""Follow the fix-point manifold G(Q, gamma) = 0 from gamma = 0 up to gamma_stop.

For each (i, y, t) the residual is

    G = -log q(t_i|y) + (1 - gamma) log Q(t_i) + gamma EP(t_i, y) - log Z(i, y)

where P is always the M-step optimum for Q, so G depends on (Q, gamma) only.
The Jacobian is approximated by its diagonal plus the gamma column, which
makes the tangent direction a closed-form, linear-time computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import trace
from .data import Dataset, PriorSpec
from .em import FitResult, Responsibilities, accumulate_stats
from .ibem import (
    MARGIN_FLOOR,
    Problem,
    TradeoffState,
    normalized_rhs_log,
    solve_at_gamma,
)
from .inference import DEFAULT_WIDTH_CAP, _clamp, _expect, log_marginals
from .model import NetworkStructure
from .trace import RunTrace, TraceRecord

Q_CLAMP = 1e-12
FLAT_GRADIENT = 1e-14


@dataclass(frozen=True)
class ContinuationConfig:
    epsilon: float = 0.01
    gamma_step_min: float = 1e-4
    gamma_step_max: float = 0.05
    inner_tol: float = 1e-6
    perturb_magnitude: float = 0.05
    seed: int = 0
    gamma_stop: float = 1.0
    max_inner_rounds: int = 5000
    max_steps: int = 100_000
    jitter: float = 1e-3
    revive_dead: bool = True
    dead_mass: float = 1e-3

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.gamma_step_min <= self.gamma_step_max <= 1:
            raise ValueError("need 0 < gamma_step_min <= gamma_step_max <= 1")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be > 0")
        if self.perturb_magnitude < 0:
            raise ValueError("perturb_magnitude must be >= 0")
        if not 0 <= self.gamma_stop <= 1:
            raise ValueError("gamma_stop must lie in [0, 1]")
        if not 0 <= self.dead_mass < 1:
            raise ValueError("dead_mass must lie in [0, 1)")
        if self.max_inner_rounds < 1 or self.max_steps < 1:
            raise ValueError("round and step limits must be positive")


@dataclass(frozen=True)
class JacobianApprox:
    """Diagonal dG/dq and gamma column dG/dgamma, one entry per (i, y, t)."""

    diag: tuple[np.ndarray, ...]
    gamma_col: tuple[np.ndarray, ...]

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.concatenate([d.ravel() for d in self.diag]),
                np.concatenate([g.ravel() for g in self.gamma_col]))


@dataclass(frozen=True)
class DirectionVector:
    dq: tuple[np.ndarray, ...]
    dgamma: float
    clipped: bool = False
    degenerate: bool = False

    def scaled(self, c: float, **kw) -> "DirectionVector":
        return replace(self, dq=tuple(c * d for d in self.dq), dgamma=c * self.dgamma, **kw)

    def flat_dq(self) -> np.ndarray:
        return np.concatenate([d.ravel() for d in self.dq])


# ---------------------------------------------------------------------------
# residual vector and derivatives


def _fitted(state: TradeoffState) -> TradeoffState:
    """The state with P re-fitted to its Q (a no-op for states left by the solver)."""
    return TradeoffState(state.problem, state.gamma, state.q, state.problem.fit_model(state.q))


def g_residual_vector(state: TradeoffState) -> np.ndarray:
    """G for every (i, y, t), concatenated over hidden variables (row-major per table)."""
    st = _fitted(state)
    parts = []
    for i, qt in enumerate(st.q.tables):
        rhs = normalized_rhs_log(st.q.margins[i], st.ep_table(i), st.gamma)
        with np.errstate(divide="ignore"):
            parts.append((rhs - np.log(qt)).ravel())
    return np.concatenate(parts)


def info_gradient(q: Responsibilities) -> tuple[np.ndarray, ...]:
    """dI(T;Y)/dq(t_i|y) = (log q(t_i|y) - log Q(t_i)) / M, per hidden variable."""
    out = []
    for t in q.tables:
        t = np.asarray(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = (np.log(t) - np.log(t.mean(axis=0))) / t.shape[0]
        out.append(np.where(t > 0, g, 0.0))
    return tuple(out)


def approx_jacobian(state: TradeoffState) -> JacobianApprox:
    """Analytic diagonal and gamma column of dG, with P = M-step(Q) differentiated through."""
    st = _fitted(state)
    problem, gamma = st.problem, st.gamma
    s = problem.structure
    obs_vars = s.observed
    ev_pos = {v: j for j, v in enumerate(obs_vars)}
    obs = problem.obs
    M = problem.M
    a_row = float(problem.prior.pseudo_count)
    stats = accumulate_stats(s, st.q, obs)
    qs = {v: np.asarray(t) for v, t in zip(s.hidden, st.q.tables)}

    # per family: clamped 1/(n + a) over cells and 1/(N_pa + a_row) over parent configs
    inv_cell, inv_pa = [], []
    for k in range(len(s.variables)):
        fam = s.family(k)
        n = stats.counts[k]
        K = n.shape[-1]
        with np.errstate(divide="ignore"):
            cell = 1.0 / (n + a_row / K)
            pa = np.broadcast_to(1.0 / (n.sum(axis=-1, keepdims=True) + a_row), n.shape)
        inv_cell.append(_clamp(cell, fam, ev_pos, obs))
        # drop the child axis from the parent-total table before clamping
        inv_pa.append(_clamp(np.take(pa, 0, axis=-1), fam[:-1], ev_pos, obs))

    diags, gcols = [], []
    for i, v in enumerate(s.hidden):
        qt = qs[v]
        margin = qt.mean(axis=0)
        lq_margin = np.log(np.maximum(margin, MARGIN_FLOOR))
        ep = st.ep_table(i)
        pi = np.exp(normalized_rhs_log(margin, ep, gamma))
        S = np.zeros_like(qt)
        C = np.zeros_like(qt)
        for k in range(len(s.variables)):
            fam = s.family(k)
            if v not in fam:
                continue
            scope, cell = inv_cell[k]
            sq = {u: qs[u] ** 2 for u in scope if u != v}
            A = _expect(cell, scope, sq, keep=v)
            pscope, pa = inv_pa[k]
            if k == v:  # v is the child: parent totals do not involve v's state
                Bt = _expect(pa, pscope, {u: qs[u] ** 2 for u in pscope})[:, None]
                S += A - Bt
                C += pi * A - Bt
            else:
                Bt = _expect(pa, pscope, {u: qs[u] ** 2 for u in pscope if u != v}, keep=v)
                if k in qs:  # hidden child: parent totals sum the child's row
                    Bt = Bt * (qs[k].sum(axis=1) ** 2)[:, None]
                S += A - Bt
                C += pi * (A - Bt)
        dlogm = np.where(margin > MARGIN_FLOOR, 1.0 / (M * np.maximum(margin, MARGIN_FLOOR)), 0.0)
        with np.errstate(divide="ignore"):
            diag = (-1.0 / qt + (1.0 - gamma) * dlogm + gamma * S
                    - ((1.0 - gamma) * pi * dlogm + gamma * C))
        h = ep - lq_margin
        with np.errstate(invalid="ignore"):
            gcol = h - np.sum(np.where(pi > 0, pi * h, 0.0), axis=1, keepdims=True)
        for name, arr in (("diagonal", diag), ("gamma column", gcol)):
            bad = np.argwhere(~np.isfinite(arr))
            if bad.size:
                y, t = (int(x) for x in bad[0])
                raise FloatingPointError(
                    f"non-finite {name} entry at hidden {i}, instance {y}, state {t}"
                )
        diags.append(diag)
        gcols.append(gcol)
    return JacobianApprox(tuple(diags), tuple(gcols))


def null_direction(jac: JacobianApprox) -> DirectionVector:
    """Closed-form solution of the diagonal-plus-column system with dgamma = 1."""
    if any(np.any(d == 0.0) for d in jac.diag):
        return DirectionVector(tuple(np.zeros_like(d) for d in jac.diag), 1.0, degenerate=True)
    return DirectionVector(tuple(-g / d for d, g in zip(jac.diag, jac.gamma_col)), 1.0)


def scale_step(direction: DirectionVector, state: TradeoffState,
               config: ContinuationConfig) -> DirectionVector:
    """Rescale so the first-order change of I(T;Y) is epsilon, then bound dgamma."""
    if direction.degenerate:
        return direction.scaled(config.gamma_step_min / direction.dgamma)
    grad = np.concatenate([g.ravel() for g in info_gradient(state.q)])
    dot = float(grad @ direction.flat_dq())
    if abs(dot) < FLAT_GRADIENT:
        return direction.scaled(config.gamma_step_max / direction.dgamma)
    d = direction.scaled(config.epsilon / abs(dot))
    if d.dgamma > config.gamma_step_max:
        return d.scaled(config.gamma_step_max / d.dgamma, clipped=True)
    if d.dgamma < config.gamma_step_min:
        return d.scaled(config.gamma_step_min / d.dgamma, clipped=True)
    return d


def take_step(q: Responsibilities, direction: DirectionVector) -> Responsibilities:
    """Additive step, then clamp into [Q_CLAMP, 1] and renormalize rows."""
    tables = []
    for t, d in zip(q.tables, direction.dq):
        new = np.clip(np.asarray(t) + d, Q_CLAMP, 1.0)
        tables.append(new / new.sum(axis=1, keepdims=True))
    return Responsibilities(tables)


def revive_dead_states(table: np.ndarray, dead_mass: float) -> np.ndarray:
    """Turn states with margin below ``dead_mass`` into copies of the heaviest live states.

    Each live state donates half of every row to one dead state, so the copy
    starts identical to it and the Lagrangian is unchanged. A state whose
    margin has collapsed cannot come back on its own: its CPT rows fall back
    to the prior and its own P(t) is near zero.
    """
    table = np.array(table, dtype=float)
    margin = table.mean(axis=0)
    dead = np.flatnonzero(margin < dead_mass)
    live = [t for t in np.argsort(-margin, kind="stable") if margin[t] >= dead_mass]
    for d, src in zip(dead, live):
        half = table[:, src] / 2
        table[:, src] = half
        table[:, d] += half
    return table / table.sum(axis=1, keepdims=True)


def perturb_and_resolve(state: TradeoffState, config: ContinuationConfig,
                        seed=None) -> tuple[TradeoffState, bool]:
    """Jitter every q entry by a factor exp(U[-m, m]), re-solve, keep it if the objective drops.

    With ``config.revive_dead`` dead states are first re-seeded as copies of
    live ones, so that the jitter can split a cluster into them.
    """
    m = config.perturb_magnitude
    if m == 0:
        return state, False
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tables = []
    for t in state.q.tables:
        t = revive_dead_states(t, config.dead_mass) if config.revive_dead else np.asarray(t)
        p = t * np.exp(rng.uniform(-m, m, size=t.shape))
        tables.append(p / p.sum(axis=1, keepdims=True))
    q = Responsibilities(tables)
    trial = TradeoffState(state.problem, state.gamma, q, state.problem.fit_model(q))
    trial = solve_at_gamma(trial, config.inner_tol, config.max_inner_rounds)
    if trial.converged and not trial.oscillated and trial.objective < state.objective:
        return trial, True
    return state, False


# ---------------------------------------------------------------------------
# driver


def trivial_start(problem: Problem, config: ContinuationConfig) -> TradeoffState:
    """Every row equal to a seeded, slightly jittered copy of the uniform margin."""
    rng = np.random.default_rng([config.seed, 0x5eed])
    tables = []
    for v in problem.structure.hidden:
        c = problem.structure.cards[v]
        margin = np.full(c, 1.0 / c) * (1.0 + config.jitter * rng.uniform(-1, 1, size=c))
        margin /= margin.sum()
        tables.append(np.tile(margin, (problem.M, 1)))
    q = Responsibilities(tables)
    return TradeoffState(problem, 0.0, q, problem.fit_model(q))


def _record(step, state: TradeoffState, heldout_obs, accepted=False, oscillated=False,
            rounds=0) -> TraceRecord:
    held = math.nan
    if heldout_obs is not None:
        held = float(np.mean(log_marginals(state.model, heldout_obs, state.problem.width_cap)))
    return TraceRecord(step, state.gamma, state.lagrangian, state.objective, state.info,
                       state.em_f, state.train_ll, held, rounds, state.residual, accepted,
                       oscillated)


def run_continuation(structure: NetworkStructure, data: Dataset,
                     config: ContinuationConfig = ContinuationConfig(),
                     prior: PriorSpec = PriorSpec(), heldout: Dataset | None = None,
                     width_cap: int = DEFAULT_WIDTH_CAP) -> FitResult:
    """IB-EM: track the solution from the trivial state at gamma = 0 to ``config.gamma_stop``.

    Each step computes the approximate tangent, scales it by the expected
    change in I(T;Y), re-solves at the new gamma and tries one random
    perturbation. The last step is truncated to land on ``gamma_stop``.
    """
    problem = Problem(structure, data, prior, width_cap)
    heldout_obs = heldout.for_structure(structure) if heldout is not None else None
    state = solve_at_gamma(trivial_start(problem, config), config.inner_tol,
                           config.max_inner_rounds)
    run = RunTrace([_record(0, state, heldout_obs, rounds=state.rounds)])
    converged = state.converged
    step = 0
    while state.gamma < config.gamma_stop and step < config.max_steps:
        step += 1
        direction = null_direction(approx_jacobian(state))
        direction = scale_step(direction, state, config)
        trace.emit("step", direction=direction, state=state, config=config)
        truncated = state.gamma + direction.dgamma >= config.gamma_stop
        if truncated:
            direction = direction.scaled((config.gamma_stop - state.gamma) / direction.dgamma)
        gamma = config.gamma_stop if truncated else state.gamma + direction.dgamma
        q = take_step(state.q, direction)
        new = TradeoffState(problem, gamma, q, problem.fit_model(q))
        new = solve_at_gamma(new, config.inner_tol, config.max_inner_rounds)
        rounds = new.rounds
        oscillated = new.oscillated
        new, accepted = perturb_and_resolve(new, config, seed=[config.seed, step])
        converged = new.converged
        run.append(_record(step, new, heldout_obs, accepted, oscillated, rounds))
        state = new
    return FitResult(state.model, state.q, run, converged, state.objective, step, config.seed)
