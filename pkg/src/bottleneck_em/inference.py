"""Exact inference by variable elimination, plus mean-field expected log-joints.

Every routine works on a *batch* of evidence rows that share the same set of
clamped variables (the usual situation: a dataset over the observed
variables). Factors carry a leading batch axis and live in log space.
"""

from __future__ import annotations

import itertools
import math
import string
from typing import Mapping, Sequence

import numpy as np

from .model import Model, ModelError

DEFAULT_WIDTH_CAP = 12


class InferenceWidthError(RuntimeError):
    """Elimination would create a clique larger than the configured cap."""

    def __init__(self, clique_size: int, cap: int):
        super().__init__(
            f"induced width bound exceeded: clique of size {clique_size} (cap {cap})"
        )
        self.clique_size = clique_size


class StateSpaceError(RuntimeError):
    pass


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    """log(sum(exp(a))) that maps all ``-inf`` slices to ``-inf`` silently."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return out.reshape(())[()]
    return np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# factors


def _clamp(table: np.ndarray, scope: tuple[int, ...], ev_pos: Mapping[int, int],
           ev_vals: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
    """Index ``table`` (axes = ``scope``) at the evidence, adding a batch axis."""
    B = ev_vals.shape[0]
    clamped = [a for a, v in enumerate(scope) if v in ev_pos]
    free = [a for a, v in enumerate(scope) if v not in ev_pos]
    free_vars = tuple(scope[a] for a in free)
    if not clamped:
        return free_vars, np.broadcast_to(table, (B,) + table.shape)
    moved = np.moveaxis(table, clamped, list(range(len(clamped))))
    idx = tuple(ev_vals[:, ev_pos[scope[a]]] for a in clamped)
    return free_vars, moved[idx]


def clamped_factors(model: Model, ev_vars: Sequence[int], ev_vals: np.ndarray):
    """One log factor per family, with evidence variables indexed out.

    Returns a list of ``(scope, array)`` with ``array.shape == (B, *cards(scope))``.
    """
    s = model.structure
    ev_pos = {v: j for j, v in enumerate(ev_vars)}
    ev_vals = np.asarray(ev_vals, dtype=np.int64)
    return [_clamp(model.log_tensors[k], s.family(k), ev_pos, ev_vals)
            for k in range(len(s.variables))]


def _align(scope, arr, target) -> np.ndarray:
    """View ``arr`` (batch + ``scope`` axes) broadcastable against ``target`` axes."""
    order = sorted(range(len(scope)), key=lambda a: target.index(scope[a]))
    arr = np.transpose(arr, [0] + [a + 1 for a in order])
    shape = [arr.shape[0]]
    it = iter(arr.shape[1:])
    present = set(scope)
    for v in target:
        shape.append(next(it) if v in present else 1)
    return arr.reshape(shape)


def _product(factors, target: tuple[int, ...], cards, B: int) -> np.ndarray:
    out = np.zeros((B,) + tuple(cards[v] for v in target))
    for scope, arr in factors:
        out = out + _align(scope, arr, target)
    return out


def min_fill_order(scopes: Sequence[Sequence[int]], eliminate: Sequence[int]) -> list[int]:
    """Greedy min-fill elimination order (ties: smaller clique, then lower index)."""
    adj: dict[int, set[int]] = {}
    for sc in scopes:
        for v in sc:
            adj.setdefault(v, set()).update(u for u in sc if u != v)
    remaining = set(eliminate)
    order = []
    while remaining:
        best = None
        for v in sorted(remaining):
            nb = list(adj.get(v, ()))
            fill = sum(1 for a, b in itertools.combinations(nb, 2) if b not in adj[a])
            key = (fill, len(nb), v)
            if best is None or key < best[0]:
                best = (key, v)
        v = best[1]
        nb = adj.pop(v, set())
        for a in nb:
            adj[a].discard(v)
            adj[a].update(u for u in nb if u != a)
        remaining.discard(v)
        order.append(v)
    return order


def eliminate(factors, keep: Sequence[int], cards, B: int,
              width_cap: int = DEFAULT_WIDTH_CAP) -> np.ndarray:
    """Sum out every variable not in ``keep``; return the log table over ``keep``."""
    keep = tuple(keep)
    factors = list(factors)
    in_scope = sorted({v for sc, _ in factors for v in sc})
    elim = [v for v in in_scope if v not in keep]
    for v in min_fill_order([sc for sc, _ in factors], elim):
        related = [f for f in factors if v in f[0]]
        factors = [f for f in factors if v not in f[0]]
        scope = tuple(sorted({u for sc, _ in related for u in sc}))
        if len(scope) - 1 > width_cap:
            raise InferenceWidthError(len(scope), width_cap)
        prod = _product(related, scope, cards, B)
        ax = scope.index(v) + 1
        factors.append((scope[:ax - 1] + scope[ax:], logsumexp(prod, axis=ax)))
    return _product(factors, keep, cards, B)


# ---------------------------------------------------------------------------
# batched public helpers


def _batch_evidence(model: Model, obs: np.ndarray):
    obs = np.asarray(obs, dtype=np.int64)
    if obs.ndim == 1:
        obs = obs[None, :]
    return tuple(model.structure.observed), obs


def log_marginals(model: Model, obs: np.ndarray, width_cap: int = DEFAULT_WIDTH_CAP) -> np.ndarray:
    """log P(x[y]) for every row of ``obs`` (columns ordered as ``structure.observed``)."""
    ev_vars, obs = _batch_evidence(model, obs)
    s = model.structure
    if not s.hidden:
        return sum(arr for _, arr in clamped_factors(model, ev_vars, obs))
    fac = clamped_factors(model, ev_vars, obs)
    return eliminate(fac, (), s.cards, obs.shape[0], width_cap)


def family_posteriors(model: Model, obs: np.ndarray, width_cap: int = DEFAULT_WIDTH_CAP):
    """Exact posteriors over the hidden variables of every family.

    Returns ``(posts, loglik)`` where ``posts[k]`` is ``(hidden_scope, probs)``
    with ``probs.shape == (B, *cards(hidden_scope))`` and ``loglik`` is the
    per-row log marginal likelihood.
    """
    ev_vars, obs = _batch_evidence(model, obs)
    s = model.structure
    B = obs.shape[0]
    fac = clamped_factors(model, ev_vars, obs)
    groups = sorted({sc for sc, _ in fac}, key=lambda sc: (-len(sc), sc))
    cache: dict[tuple[int, ...], np.ndarray] = {}
    loglik = None
    for sc in groups:
        parent = next((g for g in cache if set(sc) <= set(g)), None)
        if parent is not None:
            axes = tuple(a + 1 for a, v in enumerate(parent) if v not in sc)
            sub = cache[parent].sum(axis=axes) if axes else cache[parent]
            cache[sc] = _align(tuple(v for v in parent if v in sc), sub, sc) if sc else sub
            continue
        joint = eliminate(fac, sc, s.cards, B, width_cap)
        flat = joint.reshape(B, -1)
        ll = logsumexp(flat, axis=1)
        if loglik is None:
            loglik = ll
        with np.errstate(invalid="ignore"):
            post = np.exp(flat - ll[:, None]).reshape(joint.shape)
        cache[sc] = np.nan_to_num(post)
    if loglik is None:  # no hidden variables at all
        loglik = sum(arr for _, arr in fac)
    return [(sc, cache[sc]) for sc, _ in fac], loglik


# ---------------------------------------------------------------------------
# single-evidence API


def _evidence_arrays(model: Model, evidence: Mapping[str, int]):
    s = model.structure
    ev_vars, vals = [], []
    for name, state in evidence.items():
        if name not in s.index:
            raise ModelError(f"unknown variable {name!r} in evidence")
        k = s.index[name]
        if not 0 <= int(state) < s.cards[k]:
            raise ModelError(f"state {state} out of range for {name}")
        ev_vars.append(k)
        vals.append(int(state))
    return tuple(ev_vars), np.array([vals], dtype=np.int64).reshape(1, len(vals))


def log_marginal(model: Model, evidence: Mapping[str, int],
                 width_cap: int = DEFAULT_WIDTH_CAP) -> float:
    """log P(evidence), summing over every variable the evidence leaves free."""
    ev_vars, vals = _evidence_arrays(model, evidence)
    fac = clamped_factors(model, ev_vars, vals)
    return float(eliminate(fac, (), model.structure.cards, 1, width_cap)[0])


def exact_posterior(model: Model, evidence: Mapping[str, int],
                    width_cap: int = DEFAULT_WIDTH_CAP) -> dict[str, np.ndarray]:
    """P(variable, parents | evidence) for every family, as full family tensors."""
    s = model.structure
    ev_vars, vals = _evidence_arrays(model, evidence)
    fac = clamped_factors(model, ev_vars, vals)
    out = {}
    for k in range(len(s.variables)):
        fam = s.family(k)
        free = tuple(v for v in fam if v not in ev_vars)
        joint = eliminate(fac, free, s.cards, 1, width_cap)[0]
        z = logsumexp(joint.reshape(-1))
        post = np.exp(joint - z) if np.isfinite(z) else np.zeros_like(joint)
        full = np.zeros(s.family_shape(k))
        idx = tuple(int(vals[0, ev_vars.index(v)]) if v in ev_vars else slice(None) for v in fam)
        full[idx] = post
        out[s.variables[k].name] = full
    return out


def brute_force_log_marginal(model: Model, evidence: Mapping[str, int],
                             max_states: int = 10**6) -> float:
    """Test oracle: enumerate every completion of ``evidence`` and sum."""
    from .model import log_joint

    s = model.structure
    free = [v for v in s.variables if v.name not in evidence]
    size = math.prod(v.cardinality for v in free)
    if size > max_states:
        raise StateSpaceError(f"{size} joint states exceed the bound {max_states}")
    terms = []
    for combo in itertools.product(*(range(v.cardinality) for v in free)):
        a = dict(evidence)
        a.update({v.name: c for v, c in zip(free, combo)})
        terms.append(log_joint(model, a))
    return float(logsumexp(np.array(terms)))


# ---------------------------------------------------------------------------
# mean-field expectations

_LETTERS = string.ascii_letters[1:]


def _expect(arr: np.ndarray, scope: tuple[int, ...], qs: Mapping[int, np.ndarray],
            keep: int | None = None) -> np.ndarray:
    """E over independent per-row distributions ``qs[v]`` of ``arr`` (batch + scope).

    ``keep`` leaves one scope variable un-averaged. ``0 * -inf`` counts as 0.
    """
    if not scope:
        return arr if keep is None else arr[:, None]
    neg = np.isneginf(arr)
    has_neg = bool(neg.any())
    if len(scope) == 1 and not has_neg:
        if keep is not None:
            return arr
        return np.sum(arr * qs[scope[0]], axis=1)
    sub = "a" + "".join(_LETTERS[j] for j in range(len(scope)))
    ops, subs = [], []
    for j, v in enumerate(scope):
        if v != keep:
            ops.append(qs[v])
            subs.append("a" + _LETTERS[j])
    out = "a" + (_LETTERS[scope.index(keep)] if keep is not None else "")
    expr = ",".join([sub] + subs) + "->" + out
    opt = len(scope) > 2
    if not has_neg:
        return np.einsum(expr, arr, *ops, optimize=opt)
    val = np.einsum(expr, np.where(neg, 0.0, arr), *ops, optimize=opt)
    hit = np.einsum(expr, neg.astype(float), *ops, optimize=opt)
    return np.where(hit > 0, -np.inf, val)


def _q_by_var(model: Model, q) -> dict[int, np.ndarray]:
    return {v: np.asarray(t) for v, t in zip(model.structure.hidden, q.tables)}


def expected_log_joint_table(model: Model, q, obs: np.ndarray, i: int,
                             factors=None) -> np.ndarray:
    """EP(t_i, y) for every instance and state: shape ``(M, |T_i|)``.

    EP(t_i, y) = E over prod_{j != i} q_j(.|y), with T_i = t_i, of log P(x[y], T).
    With one hidden variable this is log P(x[y], t).
    """
    if factors is None:
        factors = clamped_factors(model, *_batch_evidence(model, obs))
    target = model.structure.hidden[i]
    qs = _q_by_var(model, q)
    total = 0.0
    for scope, arr in factors:
        if target in scope:
            total = total + _expect(arr, scope, qs, keep=target)
        else:
            total = total + _expect(arr, scope, qs)[:, None]
    B = factors[0][1].shape[0]
    return np.broadcast_to(total, (B, model.structure.cards[target])).copy()


def expected_log_joint(model: Model, q, obs: np.ndarray, factors=None) -> np.ndarray:
    """E_q[log P(x[y], T)] per instance, shape ``(M,)``."""
    if factors is None:
        factors = clamped_factors(model, *_batch_evidence(model, obs))
    qs = _q_by_var(model, q)
    return sum(_expect(arr, scope, qs) for scope, arr in factors)


def clamped_expected_log_joint(model: Model, q, obs: np.ndarray, y: int, i: int, t: int) -> float:
    """Scalar EP(t_i, y); see :func:`expected_log_joint_table`."""
    obs = np.asarray(obs, dtype=np.int64)
    row = obs[y:y + 1]
    sub = type(q)([np.asarray(tab)[y:y + 1] for tab in q.tables])
    return float(expected_log_joint_table(model, sub, row, i)[0, t])
