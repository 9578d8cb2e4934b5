"""Central finite differences of G and I(T;Y), and the exact tangent of a tiny instance."""

from __future__ import annotations

import numpy as np

from bottleneck_em.continuation import g_residual_vector
from bottleneck_em.em import Responsibilities
from bottleneck_em.ibem import TradeoffState

from oracles import mutual_information_oracle


def _with_q(state, tables, gamma=None) -> TradeoffState:
    q = Responsibilities(tables, check=False)
    g = state.gamma if gamma is None else gamma
    return TradeoffState(state.problem, g, q, state.problem.fit_model(q))


def _bump(state, i, y, t, h):
    tables = [np.array(x) for x in state.q.tables]
    tables[i][y, t] += h
    return tables


def _offset(state, i) -> int:
    return sum(np.asarray(x).size for x in state.q.tables[:i])


def fd_diagonal_entry(state, i, y, t, h=1e-6) -> float:
    k = _offset(state, i) + y * state.q.tables[i].shape[1] + t
    up = g_residual_vector(_with_q(state, _bump(state, i, y, t, h)))[k]
    dn = g_residual_vector(_with_q(state, _bump(state, i, y, t, -h)))[k]
    return (up - dn) / (2 * h)


def fd_gamma_column(state, h=1e-6) -> np.ndarray:
    tables = [np.array(x) for x in state.q.tables]
    up = g_residual_vector(_with_q(state, tables, state.gamma + h))
    dn = g_residual_vector(_with_q(state, tables, state.gamma - h))
    return (up - dn) / (2 * h)


def fd_info_gradient_entry(state, i, y, t, h=1e-6) -> float:
    up = mutual_information_oracle(_bump(state, i, y, t, h)[i])
    dn = mutual_information_oracle(_bump(state, i, y, t, -h)[i])
    return (up - dn) / (2 * h)


def full_jacobian(state, h=1e-6) -> np.ndarray:
    """Every column of dG/d(q, gamma) by central differences; last column is gamma."""
    cols = []
    for i, table in enumerate(state.q.tables):
        M, K = table.shape
        for y in range(M):
            for t in range(K):
                up = g_residual_vector(_with_q(state, _bump(state, i, y, t, h)))
                dn = g_residual_vector(_with_q(state, _bump(state, i, y, t, -h)))
                cols.append((up - dn) / (2 * h))
    cols.append(fd_gamma_column(state, h))
    return np.stack(cols, axis=1)


def exact_null_direction(state) -> np.ndarray:
    """Right singular vector of the smallest singular value, oriented to raise gamma."""
    _, _, vt = np.linalg.svd(full_jacobian(state))
    v = vt[-1]
    return v if v[-1] > 0 else -v
