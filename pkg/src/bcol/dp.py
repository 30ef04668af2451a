"""Exact counterfactual-budgeting Bellman operator and budgeted value iteration.

``Q[s, b, a]`` is the value of playing ``a`` in ``s`` when ``b`` counterfactual
decisions remain *after* ``a`` (the budget carried into the next state). The
backup is

    (T Q)(s, b, a) = r(s, a) + gamma * E_{s'} V_Q(s', b)
    V_Q(s, 0) = E_{a ~ mu} Q(s, 0, a)
    V_Q(s, b) = max(max_a Q(s, b-1, a), E_{a ~ mu} Q(s, b, a))     for b > 0

Every sweep is a full Jacobi update from the previous table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import BudgetedPolicy, FiniteMdp, NonConvergenceError, PolicyTable

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITERS = 100_000


@dataclass(frozen=True, eq=False)
class BudgetedQ:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 3:
            raise ValueError(f"BudgetedQ values must be (S, B+1, A), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, num_states: int, max_budget: int, num_actions: int) -> "BudgetedQ":
        return cls(np.zeros((num_states, max_budget + 1, num_actions)))

    @property
    def max_budget(self) -> int:
        return self.values.shape[1] - 1

    @property
    def num_states(self) -> int:
        return self.values.shape[0]

    @property
    def num_actions(self) -> int:
        return self.values.shape[2]

    def sup_distance(self, other: "BudgetedQ | np.ndarray") -> float:
        o = other.values if isinstance(other, BudgetedQ) else np.asarray(other)
        return float(np.max(np.abs(self.values - o)))


def _check_dims(mdp: FiniteMdp, mu: PolicyTable, q: BudgetedQ) -> None:
    S, A = mdp.num_states, mdp.num_actions
    if q.values.shape[0] != S or q.values.shape[2] != A:
        raise ValueError(f"Q shape {q.values.shape} does not match mdp (S={S}, A={A})")
    if mu.probs.shape != (S, A):
        raise ValueError(f"behavior policy shape {mu.probs.shape} does not match mdp {(S, A)}")


def v_from_q(q: BudgetedQ, mu: PolicyTable, state: int, budget: int) -> float:
    if not 0 <= budget <= q.max_budget:
        raise IndexError(f"budget {budget} outside 0..{q.max_budget}")
    follow = float(mu.probs[state] @ q.values[state, budget])
    if budget == 0:
        return follow
    return max(float(np.max(q.values[state, budget - 1])), follow)


def v_table(q: BudgetedQ, mu: PolicyTable) -> np.ndarray:
    """V_Q[s, b] for every state and budget at once."""
    follow = np.einsum("sa,sba->sb", mu.probs, q.values)
    v = follow.copy()
    if q.max_budget > 0:
        spend = q.values[:, :-1, :].max(axis=2)
        v[:, 1:] = np.maximum(spend, follow[:, 1:])
    return v


def counterfactual_branch(q: BudgetedQ, mu: PolicyTable) -> np.ndarray:
    """Boolean [s, b]: True where spending a unit strictly beats following mu.

    Ties go to mu, and b = 0 is never counterfactual.
    """
    follow = np.einsum("sa,sba->sb", mu.probs, q.values)
    out = np.zeros(follow.shape, dtype=bool)
    if q.max_budget > 0:
        out[:, 1:] = q.values[:, :-1, :].max(axis=2) > follow[:, 1:]
    return out


def apply_cb_operator(mdp: FiniteMdp, mu: PolicyTable, q: BudgetedQ) -> BudgetedQ:
    _check_dims(mdp, mu, q)
    v = v_table(q, mu)
    cont = np.einsum("sat,tb->sba", mdp.transition, v)
    return BudgetedQ(mdp.reward[:, None, :] + mdp.discount * cont)


@dataclass(frozen=True)
class SolveResult:
    q: BudgetedQ
    iterations: int
    residual: float


def budgeted_value_iteration(
    mdp: FiniteMdp,
    mu: PolicyTable,
    B: int,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> SolveResult:
    """Iterate the budgeted backup from Q = 0 until ||Q - T Q||_inf < tol.

    The returned table is within ``tol / (1 - gamma)`` of the unique fixed point.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if B < 0:
        raise ValueError("B must be nonnegative")
    q = BudgetedQ.zeros(mdp.num_states, B, mdp.num_actions)
    residual = np.inf
    for it in range(1, max_iters + 1):
        q_new = apply_cb_operator(mdp, mu, q)
        residual = q_new.sup_distance(q)
        q = q_new
        if residual < tol:
            return SolveResult(q, it, residual)
    raise NonConvergenceError("budgeted value iteration hit max_iters", residual, max_iters)


def standard_value_iteration(
    mdp: FiniteMdp, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS
) -> np.ndarray:
    """Unbudgeted optimal Q*[s, a]."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.num_states, mdp.num_actions))
    residual = np.inf
    for _ in range(max_iters):
        q_new = mdp.reward + mdp.discount * mdp.transition @ q.max(axis=1)
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        if residual < tol:
            return q
    raise NonConvergenceError("value iteration hit max_iters", residual, max_iters)


def contraction_ratio(mdp: FiniteMdp, mu: PolicyTable, q1: BudgetedQ, q2: BudgetedQ) -> float:
    gap = q1.sup_distance(q2)
    if gap == 0.0:
        return 0.0
    return apply_cb_operator(mdp, mu, q1).sup_distance(apply_cb_operator(mdp, mu, q2)) / gap


def contraction_probe(mdp: FiniteMdp, mu: PolicyTable, B: int, trials: int, seed=0) -> float:
    """Largest observed ||T Q1 - T Q2|| / ||Q1 - Q2|| over random pairs.

    Pairs mix three shapes: independent Gaussian tables, a table and a
    sparse perturbation of it, and a table and a constant shift of it.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    shape = (mdp.num_states, B + 1, mdp.num_actions)
    scale = max(mdp.r_max, 1.0) / (1.0 - mdp.discount)
    worst = 0.0
    for k in range(trials):
        q1 = rng.normal(scale=scale, size=shape)
        kind = k % 3
        if kind == 0:
            q2 = rng.normal(scale=scale, size=shape)
        elif kind == 1:
            q2 = q1 + rng.normal(scale=scale, size=shape) * (rng.random(shape) < 0.2)
        else:
            # a shift far below |Q| would only measure float rounding, not the operator
            q2 = q1 + rng.choice([-1.0, 1.0]) * scale * (1.0 + rng.random())
        worst = max(worst, contraction_ratio(mdp, mu, BudgetedQ(q1), BudgetedQ(q2)))
    return worst


def extract_greedy_budgeted_policy(q: BudgetedQ) -> BudgetedPolicy:
    """Deterministic argmax over actions for every (s, b); ties go to the lowest index."""
    best = np.argmax(q.values, axis=2)
    probs = np.zeros(q.values.shape)
    np.put_along_axis(probs, best[..., None], 1.0, axis=2)
    return BudgetedPolicy(probs)
