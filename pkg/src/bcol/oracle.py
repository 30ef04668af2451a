"""Independent certificates for the budgeted fixed point.

Both routes work on an explicit product MDP over (state, remaining budget)
and share no code with :mod:`bcol.dp`.

Math notes. With the budget folded into the state, the constraint b_t >= 0
becomes plain reachability: real actions move (s, b) -> (s', b - 1) and are
only legal for b > 0, while the extra ``follow-mu`` action moves
(s, b) -> (s', b) with the mu-mixture of rewards and transitions. The
constrained problem is then an ordinary discounted MDP, which has a
deterministic stationary optimum, so enumerating deterministic stationary
augmented policies is exhaustive. Illegal actions self-loop with a reward
strictly below any achievable value and are therefore never optimal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dp import BudgetedQ
from .mdp import FiniteMdp, NonConvergenceError, PolicyTable, sample_index

STATE_CAP = 10**6
ENUMERATION_CAP = 10**7


class OracleTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class AugmentedMdp:
    mdp: FiniteMdp
    base_states: int
    base_actions: int
    max_budget: int

    @property
    def follow_action(self) -> int:
        return self.base_actions

    def index(self, state: int, budget: int) -> int:
        return state * (self.max_budget + 1) + budget

    def split(self, index: int) -> tuple[int, int]:
        return divmod(index, self.max_budget + 1)

    def legal(self, index: int, action: int) -> bool:
        return action == self.follow_action or self.split(index)[1] > 0


def illegal_penalty(mdp: FiniteMdp) -> float:
    # the extra -1 keeps the sentinel strictly below legal values when r_max = 0
    return -2.0 * mdp.r_max / (1.0 - mdp.discount) - 1.0


def build_augmented_mdp(mdp: FiniteMdp, mu: PolicyTable, B: int, state_cap: int = STATE_CAP) -> AugmentedMdp:
    S, A = mdp.num_states, mdp.num_actions
    n = S * (B + 1)
    if n > state_cap:
        raise OracleTooLarge(f"augmented MDP would have {n} states (cap {state_cap})")
    reward = np.zeros((n, A + 1))
    trans = np.zeros((n, A + 1, n))
    follow_r = (mu.probs * mdp.reward).sum(axis=1)
    follow_p = np.einsum("sa,sat->st", mu.probs, mdp.transition)
    penalty = illegal_penalty(mdp)
    for s in range(S):
        for b in range(B + 1):
            i = s * (B + 1) + b
            for a in range(A):
                if b > 0:
                    reward[i, a] = mdp.reward[s, a]
                    for t in range(S):
                        trans[i, a, t * (B + 1) + b - 1] = mdp.transition[s, a, t]
                else:
                    reward[i, a] = penalty
                    trans[i, a, i] = 1.0
            reward[i, A] = follow_r[s]
            for t in range(S):
                trans[i, A, t * (B + 1) + b] = follow_p[s, t]
    init = np.zeros(n)
    for s in range(S):
        init[s * (B + 1) + B] = mdp.initial_dist[s]
    aug = FiniteMdp(reward, trans, init, mdp.discount)
    return AugmentedMdp(aug, S, A, B)


def _augmented_optimal_values(aug: FiniteMdp, tol: float, max_iters: int) -> np.ndarray:
    v = np.zeros(aug.num_states)
    for _ in range(max_iters):
        q = aug.reward + aug.discount * np.einsum("iaj,j->ia", aug.transition, v)
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            return v_new
        v = v_new
    raise NonConvergenceError("augmented value iteration hit max_iters", float(np.max(np.abs(v_new - v))), max_iters)


def reindex_q(mdp: FiniteMdp, v_aug: np.ndarray, B: int) -> BudgetedQ:
    """Q(s, b, a) = r(s, a) + gamma * E_{s'} V_aug(s', b)."""
    v = v_aug.reshape(mdp.num_states, B + 1)
    q = np.empty((mdp.num_states, B + 1, mdp.num_actions))
    for b in range(B + 1):
        q[:, b, :] = mdp.reward + mdp.discount * mdp.transition @ v[:, b]
    return BudgetedQ(q)


def oracle_q_via_augmented_vi(
    mdp: FiniteMdp, mu: PolicyTable, B: int, tol: float = 1e-12, max_iters: int = 10**6
) -> BudgetedQ:
    aug = build_augmented_mdp(mdp, mu, B)
    v = _augmented_optimal_values(aug.mdp, tol, max_iters)
    return reindex_q(mdp, v, B)


@dataclass(frozen=True)
class EnumerationResult:
    q: BudgetedQ
    best_choice: np.ndarray  # [s, b] -> real action, or num_actions for follow-mu
    candidates: int


def enumeration_size(mdp: FiniteMdp, B: int) -> int:
    return (mdp.num_actions + 1) ** (mdp.num_states * B)


def oracle_q_via_enumeration(
    mdp: FiniteMdp, mu: PolicyTable, B: int, cap: int = ENUMERATION_CAP, chunk: int = 4096
) -> EnumerationResult:
    """Pointwise max of Q over every deterministic stationary augmented policy.

    At b = 0 only follow-mu is a candidate; elsewhere each (s, b) picks one of
    the real actions or follow-mu. Each candidate is evaluated by a direct
    linear solve on the augmented MDP.
    """
    count = enumeration_size(mdp, B)
    if count > cap:
        raise OracleTooLarge(
            f"{count} candidate policies exceed the enumeration cap {cap}; use oracle_q_via_augmented_vi"
        )
    aug = build_augmented_mdp(mdp, mu, B)
    S, A, n = mdp.num_states, mdp.num_actions, aug.mdp.num_states
    free = [aug.index(s, b) for s in range(S) for b in range(1, B + 1)]
    forced = [aug.index(s, 0) for s in range(S)]
    eye = np.eye(n)
    best_v = np.full(n, -np.inf)
    best_choice = np.full(n, A, dtype=int)
    best_total = -np.inf
    rows = np.arange(n)
    combos = itertools.product(range(A + 1), repeat=len(free))
    while True:
        block = list(itertools.islice(combos, chunk))
        if not block:
            break
        choice = np.full((len(block), n), A, dtype=int)
        if free:
            choice[:, free] = np.array(block, dtype=int)
        choice[:, forced] = A
        r_pi = aug.mdp.reward[rows, choice]
        p_pi = aug.mdp.transition[rows, choice]
        v = np.linalg.solve(eye - aug.mdp.discount * p_pi, r_pi[..., None])[..., 0]
        best_v = np.maximum(best_v, v.max(axis=0))
        # an optimal stationary policy dominates every state at once, so it also maximizes the sum
        totals = v.sum(axis=1)
        k = int(np.argmax(totals))
        if totals[k] > best_total:
            best_total, best_choice = totals[k], choice[k]
    return EnumerationResult(reindex_q(mdp, best_v, B), best_choice.reshape(S, B + 1), count)


def enumerated_policy_decide(result: EnumerationResult, mu: PolicyTable):
    """Decision callback that plays the best enumerated augmented policy."""
    follow = result.q.num_actions

    def decide(t, s, b, rng):
        c = int(result.best_choice[s, b])
        if c == follow:
            return sample_index(mu.probs[s], rng), False
        return c, True

    return decide
