"""Sample-based budgeted training on offline data with tabular parameters.

Parameters are tables with one head per budget level: ``theta[s, b, a]`` for
the critic (plus a delayed copy for targets) and ``logits[s, b, a]`` for a
softmax actor. Head ``b`` of the actor is trained to maximize
``theta[s, b, :]``; the counterfactual branch of a backup at budget ``b``
needs an action maximizing ``Q(s', b - 1, .)`` and therefore samples head
``b - 1``.

Losses are averaged over the batch and summed over budget heads.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Protocol

import numpy as np

from .dp import BudgetedQ
from .mdp import BudgetedPolicy

log = logging.getLogger(__name__)


class Batch(Protocol):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray


@dataclass(frozen=True)
class Minibatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray

    @classmethod
    def take(cls, data: Batch, idx: np.ndarray) -> "Minibatch":
        return cls(data.s[idx], data.a[idx], data.r[idx], data.s_next[idx], data.a_next[idx])

    def __len__(self) -> int:
        return len(self.s)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, where: str, value: float, bound: float):
        super().__init__(f"training diverged at step {step}: {where} = {value:.6g} exceeds bound {bound:.6g}")
        self.step = step
        self.where = where
        self.value = value
        self.bound = bound


@dataclass(frozen=True)
class TrainConfig:
    budget: int = 1
    omega: float = 10.0
    m: int = 5
    alpha_q: float = 0.1
    alpha_p: float = 0.1
    tau: float = 0.005
    steps: int = 20_000
    batch_size: int | None = None
    discount: float = 0.99
    seed: int = 0
    log_every: int = 1000

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.alpha_q <= 0 or self.alpha_p <= 0:
            raise ValueError("step sizes must be positive")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.discount < 1:
            raise ValueError("discount must lie in [0, 1)")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown TrainConfig fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class QParams:
    online: np.ndarray
    target: np.ndarray

    @classmethod
    def zeros(cls, num_states: int, heads: int, num_actions: int) -> "QParams":
        z = np.zeros((num_states, heads, num_actions))
        return cls(z, z.copy())

    def __post_init__(self):
        if self.online.shape != self.target.shape:
            raise ValueError("online and target tables must share a shape")

    @property
    def q(self) -> BudgetedQ:
        return BudgetedQ(self.online)


@dataclass(frozen=True, eq=False)
class SoftPolicyParams:
    logits: np.ndarray

    @classmethod
    def zeros(cls, num_states: int, heads: int, num_actions: int) -> "SoftPolicyParams":
        return cls(np.zeros((num_states, heads, num_actions)))

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def as_policy(self) -> BudgetedPolicy:
        p = self.probs
        return BudgetedPolicy(p / p.sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _flat(shape: tuple[int, int, int], s: np.ndarray, b: np.ndarray, a: np.ndarray) -> np.ndarray:
    return ((s * shape[1] + b) * shape[2] + a).ravel()


def _scatter(shape: tuple[int, ...], flat: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Unbuffered ``out.flat[flat] += values`` into a fresh zero table (bincount is much faster than add.at)."""
    return np.bincount(flat, weights=np.ravel(values), minlength=int(np.prod(shape))).reshape(shape)


def _sample_actions(probs_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; ``probs_rows[..., A]`` and ``u[..., k]`` -> indices ``[..., k]``."""
    cdf = np.cumsum(probs_rows, axis=-1)
    idx = (u[..., :, None] >= cdf[..., None, :]).sum(axis=-1)
    return np.minimum(idx, probs_rows.shape[-1] - 1)


# --- targets ------------------------------------------------------------------


def approx_cb_target(q_target: BudgetedQ | np.ndarray, policy: SoftPolicyParams, transition, b: int,
                     m: int, rng: np.random.Generator, discount: float) -> float:
    """One-sample budgeted target for a single transition at budget ``b``."""
    q = q_target.values if isinstance(q_target, BudgetedQ) else q_target
    if not 0 <= b < q.shape[1]:
        raise IndexError(f"budget {b} outside 0..{q.shape[1] - 1}")
    if m < 1:
        raise ValueError("m must be >= 1")
    t = transition
    follow = q[t.s_next, b, t.a_next]
    if b == 0:
        return float(t.r + discount * follow)
    probs = policy.probs[t.s_next, b - 1]
    samples = _sample_actions(probs, rng.random(m))
    spend = q[t.s_next, b - 1, samples].max()
    return float(t.r + discount * max(spend, follow))


def _max_of_samples(q_rows: np.ndarray, probs_rows: np.ndarray, rows: np.ndarray, m: int,
                    u: np.ndarray) -> np.ndarray:
    """Draw ``max_k q[a_k]`` with ``a_1..a_m`` iid from ``probs`` for each requested row.

    ``q_rows``/``probs_rows`` are ``[R, A]`` tables and ``rows`` picks one per
    draw. The max of m iid draws has CDF ``F^m`` over actions sorted by value,
    so a single uniform per draw is inverted against ``F >= u**(1/m)``; this
    has exactly the distribution of taking m samples and keeping the best.
    """
    order = np.argsort(q_rows, axis=-1, kind="stable")
    q_sorted = np.take_along_axis(q_rows, order, axis=-1)
    cdf = np.cumsum(np.take_along_axis(probs_rows, order, axis=-1), axis=-1)
    v = u ** (1.0 / m)
    j = (cdf[rows] < v[:, None]).sum(axis=-1)
    j = np.minimum(j, q_rows.shape[-1] - 1)
    return q_sorted[rows, j]


def batch_targets(q_target: np.ndarray, probs: np.ndarray, batch: Batch, m: int,
                  rng: np.random.Generator, discount: float) -> np.ndarray:
    """Targets ``y[i, b]`` for every transition and budget head."""
    S, H, A = q_target.shape
    sn, an = batch.s_next, batch.a_next
    cont = q_target[sn, :, an]  # (N, H)
    if H > 1:
        n = len(sn)
        u = rng.random((n, H - 1))
        # flatten (state, head) so each draw picks its own row of the spend table
        rows = (sn[:, None] * (H - 1) + np.arange(H - 1)[None, :]).ravel()
        spend = _max_of_samples(q_target[:, :-1].reshape(-1, A), probs[:, :-1].reshape(-1, A),
                                rows, m, u.ravel()).reshape(n, H - 1)
        cont = cont.copy()
        cont[:, 1:] = np.maximum(spend, cont[:, 1:])
    return batch.r[:, None] + discount * cont


def unbudgeted_targets(q_target: np.ndarray, probs: np.ndarray, batch: Batch, m: int,
                       rng: np.random.Generator, discount: float) -> np.ndarray:
    """The infinite-budget limit: the spending branch is always available."""
    sn, an = batch.s_next, batch.a_next
    spend = _max_of_samples(q_target[:, 0], probs[:, 0], sn, m, rng.random(len(sn)))
    cont = np.maximum(spend, q_target[sn, 0, an])
    return (batch.r + discount * cont)[:, None]


# --- losses -------------------------------------------------------------------


def td_loss(theta: np.ndarray, targets: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean over the batch, summed over heads, of squared TD errors, with its exact gradient."""
    n, H = targets.shape
    heads = np.arange(H)[None, :]
    diff = theta[batch.s[:, None], heads, batch.a[:, None]] - targets
    grad = _scatter(theta.shape, _flat(theta.shape, batch.s[:, None], heads, batch.a[:, None]),
                    2.0 * diff / n)
    return float(np.sum(diff**2) / n), grad


def q_loss(params: QParams, policy: SoftPolicyParams, batch: Batch, m: int,
           rng: np.random.Generator, discount: float) -> tuple[float, np.ndarray]:
    """Budgeted TD loss of ``params.online`` against targets built from ``params.target``.

    Targets are constants with respect to the online table.
    """
    if len(batch.s) == 0:
        raise ValueError("batch is empty")
    y = batch_targets(params.target, policy.probs, batch, m, rng, discount)
    return td_loss(params.online, y, batch)


def policy_loss(policy: SoftPolicyParams, q: BudgetedQ | np.ndarray, states: np.ndarray) -> tuple[float, np.ndarray]:
    """``-sum_b mean_s sum_a pi(a|s,b) Q(s,b,a)``, expectation over actions taken exactly."""
    qv = q.values if isinstance(q, BudgetedQ) else q
    states = np.asarray(states)
    if states.size == 0:
        raise ValueError("state batch is empty")
    # the batch mean over states equals a visit-weighted sum over the table
    weight = np.bincount(states, minlength=policy.logits.shape[0]) / len(states)
    pi = softmax(policy.logits)
    expect = np.sum(pi * qv, axis=-1, keepdims=True)
    grad = -weight[:, None, None] * pi * (qv - expect)
    return float(-np.sum(weight[:, None] * expect[..., 0])), grad


def monotonicity_penalty(theta: np.ndarray, policy: SoftPolicyParams, states: np.ndarray,
                         rng: np.random.Generator, omega: float = 1.0) -> tuple[float, np.ndarray]:
    """``omega * sum_{b<B} mean_s (max(Q(s,b,a) - Q(s,b+1,a), 0))^2`` with ``a ~ pi(.|s,b)``.

    One action is sampled per (state, budget). Gradient is with respect to ``theta``.
    """
    theta = theta.values if isinstance(theta, BudgetedQ) else theta
    H = theta.shape[1]
    if H < 2:
        raise ValueError("monotonicity penalty needs B >= 1")
    states = np.asarray(states)
    n = len(states)
    heads = np.arange(H - 1)[None, :]
    cdf = np.cumsum(policy.probs[:, :-1], axis=-1)  # per table row, then gathered
    u = rng.random((n, H - 1))
    a = np.minimum((u[..., None] >= cdf[states]).sum(axis=-1), theta.shape[2] - 1)
    s = states[:, None]
    gap = np.maximum(theta[s, heads, a] - theta[s, heads + 1, a], 0.0)
    w = 2.0 * omega * gap / n
    flat = _flat(theta.shape, s, heads, a)
    grad = _scatter(theta.shape, flat, w) - _scatter(theta.shape, flat + theta.shape[2], w)
    return float(omega * np.sum(gap**2) / n), grad


def polyak_update(params: QParams, tau: float) -> QParams:
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    return QParams(params.online, (1.0 - tau) * params.target + tau * params.online)


# --- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    step: int
    q_loss: float
    policy_loss: float
    penalty: float
    distance_to_exact: float | None
    head_disagreement: float
    monotonicity_violations: float


@dataclass
class TrainReport:
    checkpoints: list[Checkpoint] = field(default_factory=list)

    @property
    def final(self) -> Checkpoint | None:
        return self.checkpoints[-1] if self.checkpoints else None

    def rows(self) -> list[dict]:
        return [asdict(c) for c in self.checkpoints]


def head_disagreement(theta: np.ndarray, logits: np.ndarray, states: np.ndarray) -> float:
    """Fraction of (visited state, head) rows whose actor argmax differs from the critic argmax."""
    seen = np.unique(states)
    if seen.size == 0:
        return 0.0
    return float(np.mean(np.argmax(theta[seen], axis=-1) != np.argmax(logits[seen], axis=-1)))


def monotonicity_violations(theta: np.ndarray, tol: float = 1e-10) -> float:
    if theta.shape[1] < 2:
        return 0.0
    return float(np.mean(theta[:, :-1, :] > theta[:, 1:, :] + tol))


def _guard(step: int, theta: np.ndarray, logits: np.ndarray, bound: float) -> None:
    big = float(np.max(np.abs(theta))) if theta.size else 0.0
    if not np.isfinite(big) or big > bound:
        cell = np.unravel_index(int(np.argmax(np.abs(np.nan_to_num(theta, nan=np.inf)))), theta.shape)
        raise TrainingDiverged(step, f"|Q{tuple(int(c) for c in cell)}|", big, bound)
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged(step, "policy logits", float("nan"), bound)


def train(dataset, cfg: TrainConfig, reference: BudgetedQ | None = None, unbudgeted: bool = False,
          init: tuple[QParams, SoftPolicyParams] | None = None):
    """Alternate critic and actor gradient steps on a fixed dataset.

    Each step: a critic step on the TD loss plus ``omega`` times the
    monotonicity penalty, an actor step against the pre-update critic, then a
    Polyak update of the target table. Only the dataset is read; ``reference``
    is used for reporting distances and never influences the updates.

    With ``unbudgeted=True`` a single head is trained against the
    infinite-budget target (used by the no-budgeting ablation).
    """
    if not len(dataset.s):
        raise ValueError("dataset is empty")
    S, A = dataset.num_states, dataset.num_actions
    H = 1 if unbudgeted else cfg.budget + 1
    if init is None:
        params, policy = QParams.zeros(S, H, A), SoftPolicyParams.zeros(S, H, A)
    else:
        params, policy = init
    theta, target, logits = params.online.copy(), params.target.copy(), policy.logits.copy()
    rng = np.random.default_rng(cfg.seed)
    bound = 10.0 * dataset.r_max / (1.0 - cfg.discount)
    make_targets = unbudgeted_targets if unbudgeted else batch_targets
    use_penalty = cfg.omega > 0 and H > 1
    report = TrainReport()
    n = len(dataset.s)
    for step in range(1, cfg.steps + 1):
        if cfg.batch_size is None or cfg.batch_size >= n:
            batch = dataset
        else:
            batch = Minibatch.take(dataset, rng.choice(n, size=cfg.batch_size, replace=False))
        actor = SoftPolicyParams(logits)
        y = make_targets(target, actor.probs, batch, cfg.m, rng, cfg.discount)
        lq, gq = td_loss(theta, y, batch)
        pen = 0.0
        if use_penalty:
            pen, gp = monotonicity_penalty(theta, actor, batch.s, rng, cfg.omega)
            gq = gq + gp
        lp, gphi = policy_loss(actor, theta, batch.s)
        theta = theta - cfg.alpha_q * gq
        logits = logits - cfg.alpha_p * gphi
        target = (1.0 - cfg.tau) * target + cfg.tau * theta
        _guard(step, theta, logits, bound)
        if step % cfg.log_every == 0 or step == cfg.steps:
            dist = None
            if reference is not None:
                dist = float(np.max(np.abs(theta - reference.values)))
            cp = Checkpoint(step, lq, lp, pen, dist, head_disagreement(theta, logits, dataset.s),
                            monotonicity_violations(theta))
            report.checkpoints.append(cp)
            log.debug("step %d: L_Q=%.6g L_pi=%.6g penalty=%.3g dist=%s", step, lq, lp, pen, dist)
    return QParams(theta, target), SoftPolicyParams(logits), report
