"""Finite MDPs, tabular policies, rollouts and exact policy evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_TOL = 1e-12


class NonConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """Tabular MDP with dense ``reward[s, a]`` and ``transition[s, a, s']``.

    Construction only checks shapes; use :func:`validate_mdp` for the
    stochasticity and discount invariants.
    """

    reward: np.ndarray
    transition: np.ndarray
    initial_dist: np.ndarray
    discount: float

    def __post_init__(self):
        r = _frozen(self.reward)
        p = _frozen(self.transition)
        p0 = _frozen(self.initial_dist)
        if r.ndim != 2:
            raise ValueError(f"reward must be (S, A), got shape {r.shape}")
        S, A = r.shape
        if p.shape != (S, A, S):
            raise ValueError(f"transition must be {(S, A, S)}, got {p.shape}")
        if p0.shape != (S,):
            raise ValueError(f"initial_dist must be ({S},), got {p0.shape}")
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "initial_dist", p0)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))

    def truncation_bias(self, horizon: int) -> float:
        """Upper bound on the discounted reward lost by stopping after ``horizon`` steps."""
        g = self.discount
        return g**horizon * self.r_max / (1.0 - g)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Budget-free stochastic policy, ``probs[s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ValueError(f"policy probs must be (S, A), got {p.shape}")
        bad = _bad_prob_rows(p)
        if bad:
            raise ValueError(f"invalid probability rows at states {bad[:10]}")
        object.__setattr__(self, "probs", p)

    @classmethod
    def deterministic(cls, actions: Sequence[int], num_actions: int) -> "PolicyTable":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), num_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "PolicyTable":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class BudgetedPolicy:
    """Policy conditioned on the remaining budget, ``probs[s, b, a]`` for b in 0..max_budget."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 3:
            raise ValueError(f"budgeted policy probs must be (S, B+1, A), got {p.shape}")
        bad = _bad_prob_rows(p.reshape(-1, p.shape[-1]))
        if bad:
            raise ValueError(f"invalid probability rows at flat (s, b) indices {bad[:10]}")
        object.__setattr__(self, "probs", p)

    @property
    def max_budget(self) -> int:
        return self.probs.shape[1] - 1

    def row(self, state: int, budget: int) -> np.ndarray:
        if not 0 <= budget <= self.max_budget:
            raise IndexError(f"budget {budget} outside 0..{self.max_budget}")
        return self.probs[state, budget]


def _bad_prob_rows(rows: np.ndarray) -> list[int]:
    neg = np.any(rows < 0, axis=-1)
    off = np.abs(rows.sum(axis=-1) - 1.0) > PROB_TOL
    nonfinite = ~np.all(np.isfinite(rows), axis=-1)
    return [int(i) for i in np.flatnonzero(neg | off | nonfinite)]


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_mdp(mdp: FiniteMdp) -> ValidationReport:
    """Collect every invariant violation; never raises."""
    out: list[str] = []
    if not np.all(np.isfinite(mdp.reward)):
        for s, a in np.argwhere(~np.isfinite(mdp.reward)):
            out.append(f"non-finite reward at (s={s},a={a})")
    sums = mdp.transition.sum(axis=2)
    for s, a in np.argwhere(np.abs(sums - 1.0) > PROB_TOL):
        out.append(f"row sum {sums[s, a]:.12g} at (s={s},a={a})")
    for s, a, t in np.argwhere(mdp.transition < 0):
        out.append(f"negative probability {mdp.transition[s, a, t]:.12g} at (s={s},a={a},s'={t})")
    p0 = mdp.initial_dist
    if abs(p0.sum() - 1.0) > PROB_TOL:
        out.append(f"initial_dist sums to {p0.sum():.12g}")
    for s in np.flatnonzero(p0 < 0):
        out.append(f"negative initial probability at s={s}")
    if not (0.0 <= mdp.discount < 1.0):
        out.append(f"discount must be < 1 and >= 0, got {mdp.discount}")
    return ValidationReport(tuple(out))


def _check_policy_dims(mdp: FiniteMdp, policy: PolicyTable) -> None:
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match mdp {(mdp.num_states, mdp.num_actions)}"
        )


def policy_matrices(mdp: FiniteMdp, policy: PolicyTable) -> tuple[np.ndarray, np.ndarray]:
    """Return (r_pi[s], P_pi[s, s']) for the Markov chain induced by ``policy``."""
    _check_policy_dims(mdp, policy)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    return r_pi, p_pi


def evaluate_policy_exact(mdp: FiniteMdp, policy: PolicyTable, residual_tol: float = 1e-10) -> np.ndarray:
    """V^pi by a direct solve of (I - gamma P_pi) V = r_pi.

    The residual of the solve is checked against ``residual_tol``; a failing
    residual raises :class:`NonConvergenceError`.
    """
    r_pi, p_pi = policy_matrices(mdp, policy)
    lhs = np.eye(mdp.num_states) - mdp.discount * p_pi
    v = np.linalg.solve(lhs, r_pi)
    residual = float(np.max(np.abs(lhs @ v - r_pi)))
    if residual >= residual_tol:
        raise NonConvergenceError("direct policy evaluation residual too large", residual, 1)
    return v


def evaluate_policy_iterative(
    mdp: FiniteMdp, policy: PolicyTable, tol: float = 1e-12, max_iters: int = 100_000
) -> np.ndarray:
    r_pi, p_pi = policy_matrices(mdp, policy)
    v = np.zeros(mdp.num_states)
    residual = np.inf
    for it in range(1, max_iters + 1):
        v_new = r_pi + mdp.discount * p_pi @ v
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual < tol:
            return v
    raise NonConvergenceError("iterative policy evaluation did not converge", residual, max_iters)


def q_from_v(mdp: FiniteMdp, v: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.discount * mdp.transition @ v


def behavior_q(mdp: FiniteMdp, policy: PolicyTable) -> np.ndarray:
    """Q^pi(s, a) for a budget-free policy."""
    return q_from_v(mdp, evaluate_policy_exact(mdp, policy))


# --- rollouts -----------------------------------------------------------------


@dataclass(frozen=True)
class Step:
    state: int
    action: int
    reward: float
    budget: int
    counterfactual: bool


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    return_discounted: float
    return_undiscounted: float
    initial_budget: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def counterfactual_count(self) -> int:
        return sum(st.counterfactual for st in self.steps)

    @property
    def exhaustion_step(self) -> int | None:
        """Index of the step that spent the last budget unit, or None if budget remained."""
        if self.initial_budget == 0:
            return None
        for t, st in enumerate(self.steps):
            if st.counterfactual and st.budget == 1:
                return t
        return None

    def budget_bookkeeping_ok(self) -> bool:
        b = self.initial_budget
        for st in self.steps:
            if st.budget != b or b < 0:
                return False
            b -= int(st.counterfactual)
        return b >= 0


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw with the natural index ordering."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    # guards the cumsum falling a hair short of 1
    last = int(np.flatnonzero(probs > 0)[-1])
    return min(idx, last)


Decide = Callable[[int, int, int, np.random.Generator], tuple[int, bool]]


def rollout(
    mdp: FiniteMdp,
    decide: Decide,
    horizon: int,
    seed,
    budget: int = 0,
    start_state: int | None = None,
) -> Trajectory:
    """Simulate ``horizon`` steps.

    ``decide(t, state, budget, rng)`` returns ``(action, counterfactual)``;
    a counterfactual decision consumes one unit of the remaining budget.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = np.random.default_rng(seed)
    s = sample_index(mdp.initial_dist, rng) if start_state is None else int(start_state)
    b = int(budget)
    steps = []
    ret, ret_u, disc = 0.0, 0.0, 1.0
    for t in range(horizon):
        a, cf = decide(t, s, b, rng)
        if not (0 <= a < mdp.num_actions):
            raise ValueError(f"decision returned action {a} outside 0..{mdp.num_actions - 1} at step {t}")
        if cf and b <= 0:
            raise ValueError(f"counterfactual decision with exhausted budget at step {t}")
        r = float(mdp.reward[s, a])
        steps.append(Step(s, int(a), r, b, bool(cf)))
        ret += disc * r
        ret_u += r
        disc *= mdp.discount
        b -= int(cf)
        s = sample_index(mdp.transition[s, a], rng)
    return Trajectory(tuple(steps), ret, ret_u, int(budget))


def follow(policy: PolicyTable) -> Decide:
    """Decision callback sampling from a budget-free policy (never counterfactual)."""

    def decide(t, s, b, rng):
        return sample_index(policy.probs[s], rng), False

    return decide
