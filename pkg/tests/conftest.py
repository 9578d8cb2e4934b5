"""Suite-wide solver audit.

Every solver event raised anywhere in the test session is recorded, and the
acceptance tests (moved to the end of the run) check the suite-wide
invariants on that record: no round raises the objective, every converged
state meets its tolerance, every continuation step has the requested size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pytest

from bottleneck_em import trace

# states kept for the independent residual re-evaluation; bounded so the
# enumeration stays cheap
_KEEP_STATES = 60
_KEEP_MAX_M = 120
_KEEP_MAX_JOINT = 64


@dataclass
class Audit:
    rounds: int = 0
    max_increase: float = -np.inf
    worst_round: dict = field(default_factory=dict)
    converged: int = 0
    residual_violations: list = field(default_factory=list)
    kept_states: list = field(default_factory=list)
    steps: int = 0
    unclipped_steps: int = 0
    step_errors: list = field(default_factory=list)
    gamma_step_violations: list = field(default_factory=list)

    def __call__(self, kind: str, payload: dict) -> None:
        if kind == "round":
            self.rounds += 1
            inc = payload["increase"]
            if inc > self.max_increase:
                self.max_increase = inc
                self.worst_round = dict(payload)
        elif kind == "converged":
            self.converged += 1
            if not payload["residual"] < payload["tol"]:
                self.residual_violations.append((payload["residual"], payload["tol"]))
            st = payload["state"]
            joint = int(np.prod([st.problem.structure.cards[h] for h in st.problem.structure.hidden]))
            if (len(self.kept_states) < _KEEP_STATES and st.problem.M <= _KEEP_MAX_M
                    and joint <= _KEEP_MAX_JOINT):
                self.kept_states.append((st, payload["tol"]))
        elif kind == "step":
            self._check_step(payload)

    def _check_step(self, payload) -> None:
        from bottleneck_em.continuation import info_gradient

        self.steps += 1
        d, st, cfg = payload["direction"], payload["state"], payload["config"]
        lo, hi = cfg.gamma_step_min, cfg.gamma_step_max
        if not lo - 1e-15 <= d.dgamma <= hi + 1e-15:
            self.gamma_step_violations.append((d.dgamma, lo, hi))
        if d.clipped or d.degenerate:
            return
        grad = info_gradient(st.q)
        change = sum(float(np.sum(g * x)) for g, x in zip(grad, d.dq))
        if abs(change) < 1e-14 and d.dgamma == hi:
            return  # flat region: pure gamma motion at the maximal step
        self.unclipped_steps += 1
        err = abs(abs(change) - cfg.epsilon)
        if err > 1e-8:
            self.step_errors.append(err)


AUDIT = Audit()


def pytest_sessionstart(session):
    trace.subscribe(AUDIT)


def pytest_sessionfinish(session, exitstatus):
    trace.unsubscribe(AUDIT)


def pytest_collection_modifyitems(session, config, items):
    # acceptance checks read the suite-wide audit, so they run last
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py"))


@pytest.fixture
def audit() -> Audit:
    return AUDIT
