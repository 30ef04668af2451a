"""Budget-aware action selection, inference rollouts, evaluation and ablation policies."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dp import BudgetedQ
from .mdp import BudgetedPolicy, FiniteMdp, PolicyTable, Trajectory, rollout, sample_index

ABLATION_MODES = ("no_budgeting", "random_budget_unplanned", "random_budget_trained")


def _values(q) -> np.ndarray:
    return q.values if isinstance(q, BudgetedQ) else np.asarray(q)


def _probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, BudgetedPolicy) else np.asarray(policy)


@dataclass(frozen=True)
class SelectDecision:
    probs: np.ndarray
    new_budget: int
    was_counterfactual: bool
    value_cf: float
    value_mu: float


def select(policy: BudgetedPolicy, mu_hat: PolicyTable, s: int, b: int, q: BudgetedQ) -> SelectDecision:
    """Spend a budget unit at (s, b) only if it strictly beats following mu_hat.

    Spending plays the policy head that maximizes ``Q(s, b - 1, .)`` (head
    ``b - 1``, see :mod:`bcol.fitted`); the comparison uses exact
    expectations over actions, and ties keep the budget.
    """
    qv = _values(q)
    if not 0 <= b < qv.shape[1]:
        raise IndexError(f"budget {b} outside 0..{qv.shape[1] - 1}")
    follow = mu_hat.probs[s]
    value_mu = float(follow @ qv[s, b])
    if b == 0:
        return SelectDecision(follow, 0, False, -math.inf, value_mu)
    spend = _probs(policy)[s, b - 1]
    value_cf = float(spend @ qv[s, b - 1])
    if value_cf <= value_mu:
        return SelectDecision(follow, b, False, value_cf, value_mu)
    return SelectDecision(spend, b - 1, True, value_cf, value_mu)


def _greedy(probs: np.ndarray) -> int:
    return int(np.argmax(probs))


def bcol_decide(policy, mu_hat: PolicyTable, q, greedy: bool = False):
    def decide(t, s, b, rng):
        d = select(policy, mu_hat, s, b, q)
        a = _greedy(d.probs) if greedy else sample_index(d.probs, rng)
        return a, d.was_counterfactual

    return decide


def rollout_bcol(mdp: FiniteMdp, policy, mu_hat: PolicyTable, q, B: int, horizon: int, seed,
                 greedy: bool = False, start_state: int | None = None) -> Trajectory:
    """BCOL inference: start with budget B and let ``select`` decide every step."""
    if B > _values(q).shape[1] - 1:
        raise ValueError(f"budget {B} exceeds the Q table's max budget {_values(q).shape[1] - 1}")
    return rollout(mdp, bcol_decide(policy, mu_hat, q, greedy), horizon, seed, budget=B, start_state=start_state)


RolloutProducer = Callable[[object], Trajectory]


def bcol_producer(mdp, policy, mu_hat, q, B, horizon, greedy=False) -> RolloutProducer:
    return lambda seed: rollout_bcol(mdp, policy, mu_hat, q, B, horizon, seed, greedy)


def behavior_producer(mdp: FiniteMdp, mu: PolicyTable, horizon: int) -> RolloutProducer:
    def decide(t, s, b, rng):
        return sample_index(mu.probs[s], rng), False

    return lambda seed: rollout(mdp, decide, horizon, seed)


def _derived(seed, tag: int) -> np.random.SeedSequence:
    """A child stream of ``seed`` that does not mutate it (unlike ``SeedSequence.spawn``)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (tag,))


def ablation_policy(mode: str, mdp: FiniteMdp, horizon: int, B: int, mu_hat: PolicyTable,
                    q_unbudgeted: np.ndarray | None = None, policy=None) -> RolloutProducer:
    """Rollout producers for the three budgeting ablations.

    ``no_budgeting`` plays greedily on ``q_unbudgeted`` at every step.
    The two random modes pick ``B`` steps uniformly within the horizon; on
    those steps ``random_budget_unplanned`` plays greedily on
    ``q_unbudgeted`` and ``random_budget_trained`` samples the trained
    budgeted policy, while every other step follows ``mu_hat``.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {', '.join(ABLATION_MODES)}")
    if mode in ("no_budgeting", "random_budget_unplanned") and q_unbudgeted is None:
        raise ValueError(f"{mode} needs an unbudgeted Q table")
    if mode == "random_budget_trained" and policy is None:
        raise ValueError("random_budget_trained needs a trained budgeted policy")

    if mode == "no_budgeting":
        qs = np.asarray(q_unbudgeted)

        def decide(t, s, b, rng):
            return int(np.argmax(qs[s])), True

        # the budget is only bookkeeping here; one unit per step never runs out
        return lambda seed: rollout(mdp, decide, horizon, seed, budget=horizon)

    pi = _probs(policy) if policy is not None else None
    qs = np.asarray(q_unbudgeted) if q_unbudgeted is not None else None

    def produce(seed):
        chooser = np.random.default_rng(_derived(seed, 1))
        k = min(B, horizon)
        chosen = set(chooser.choice(horizon, size=k, replace=False).tolist())

        def decide(t, s, b, rng):
            if t not in chosen or b == 0:
                return sample_index(mu_hat.probs[s], rng), False
            if mode == "random_budget_unplanned":
                return int(np.argmax(qs[s])), True
            head = min(b - 1, pi.shape[1] - 1)
            return sample_index(pi[s, head], rng), True

        return rollout(mdp, decide, horizon, seed, budget=k)

    return produce


# --- evaluation ---------------------------------------------------------------


@dataclass
class EvalReport:
    discounted: np.ndarray
    undiscounted: np.ndarray
    counterfactuals: np.ndarray
    exhaustion_steps: list
    truncation_bias: float
    behavior_gap: float | None = None
    label: str = ""

    @property
    def episodes(self) -> int:
        return len(self.discounted)

    @property
    def mean(self) -> float:
        return float(np.mean(self.discounted))

    @property
    def std(self) -> float:
        return float(np.std(self.discounted))

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(self.episodes)

    @property
    def mean_undiscounted(self) -> float:
        return float(np.mean(self.undiscounted))

    @property
    def std_undiscounted(self) -> float:
        return float(np.std(self.undiscounted))

    @property
    def mean_counterfactuals(self) -> float:
        return float(np.mean(self.counterfactuals))

    def exhaustion_histogram(self) -> dict:
        """Step index at which the last budget unit was spent -> episode count ('never' if it was not)."""
        c = Counter("never" if x is None else int(x) for x in self.exhaustion_steps)
        return dict(sorted(c.items(), key=lambda kv: (kv[0] == "never", kv[0] if kv[0] != "never" else 0)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "episode", "discounted_return", "undiscounted_return", "counterfactuals", "exhaustion_step"])
        for i in range(self.episodes):
            ex = self.exhaustion_steps[i]
            w.writerow(["episode", i, repr(float(self.discounted[i])), repr(float(self.undiscounted[i])),
                        int(self.counterfactuals[i]), "" if ex is None else ex])
        w.writerow(["mean", "", repr(self.mean), repr(self.mean_undiscounted), repr(self.mean_counterfactuals), ""])
        w.writerow(["std", "", repr(self.std), repr(self.std_undiscounted), "", ""])
        w.writerow(["truncation_bias", "", repr(self.truncation_bias), "", "", ""])
        if self.behavior_gap is not None:
            w.writerow(["behavior_gap", "", repr(self.behavior_gap), "", "", ""])
        return buf.getvalue()


def episode_seeds(seed, episodes: int) -> list:
    return np.random.SeedSequence(seed).spawn(episodes)


def evaluate(mdp: FiniteMdp, producer: RolloutProducer, episodes: int, horizon: int, seed,
             behavior_gap: float | None = None, label: str = "") -> EvalReport:
    """Run ``episodes`` independently seeded rollouts and summarize their returns.

    ``horizon`` is only used for the truncation-bias bound; the producer owns
    its own horizon.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    trajs = [producer(child) for child in episode_seeds(seed, episodes)]
    return EvalReport(
        discounted=np.array([t.return_discounted for t in trajs]),
        undiscounted=np.array([t.return_undiscounted for t in trajs]),
        counterfactuals=np.array([t.counterfactual_count for t in trajs]),
        exhaustion_steps=[t.exhaustion_step for t in trajs],
        truncation_bias=mdp.truncation_bias(horizon),
        behavior_gap=behavior_gap,
        label=label,
    )


def behavior_gap(mu: PolicyTable, mu_hat: PolicyTable) -> float:
    """Largest per-state L1 distance between the true and estimated behavior policies."""
    return float(np.max(np.abs(mu.probs - mu_hat.probs).sum(axis=1)))


def at_least_within(a: EvalReport, b: EvalReport, sigmas: float = 3.0) -> bool:
    """True unless ``a``'s mean return falls below ``b``'s by more than ``sigmas`` combined standard errors."""
    se = math.sqrt(a.stderr**2 + b.stderr**2)
    return a.mean + sigmas * se >= b.mean
