"""Offline datasets logged under a behavior policy, their file format, and behavior cloning."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import FiniteMdp, PolicyTable, sample_index

DEFAULT_SMOOTHING = 1e-3
HEADER_TAG = "#bcol-dataset"
FIELDS = ("episode", "step", "s", "a", "r", "s_next", "a_next")


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    a_next: int


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Column-stored SARSA transitions.

    Within an episode, consecutive rows chain: ``(s_next, a_next)`` of row i
    equals ``(s, a)`` of row i + 1.
    """

    episode: np.ndarray
    step: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray
    num_states: int
    num_actions: int
    source_env: str = "unknown"
    source_seed: int | None = None

    def __post_init__(self):
        n = len(self.s)
        for name in FIELDS:
            col = np.array(getattr(self, name), dtype=float if name == "r" else np.int64)
            if col.shape != (n,):
                raise ValueError(f"column {name} has shape {col.shape}, expected ({n},)")
            col.setflags(write=False)
            object.__setattr__(self, name, col)
        for name, hi in (("s", self.num_states), ("s_next", self.num_states),
                         ("a", self.num_actions), ("a_next", self.num_actions)):
            col = getattr(self, name)
            if n and (col.min() < 0 or col.max() >= hi):
                raise ValueError(f"column {name} has indices outside 0..{hi - 1}")
        if not np.all(np.isfinite(self.r)):
            raise ValueError("rewards must be finite")

    def __len__(self) -> int:
        return len(self.s)

    def __getitem__(self, i: int) -> Transition:
        return Transition(int(self.s[i]), int(self.a[i]), float(self.r[i]), int(self.s_next[i]), int(self.a_next[i]))

    def transitions(self):
        return (self[i] for i in range(len(self)))

    @property
    def num_episodes(self) -> int:
        return len(np.unique(self.episode))

    def episode_bounds(self) -> list[tuple[int, int]]:
        """Half-open row ranges, one per episode, in file order."""
        if not len(self):
            return []
        cuts = np.flatnonzero(np.diff(self.episode) != 0) + 1
        starts = np.concatenate([[0], cuts])
        ends = np.concatenate([cuts, [len(self)]])
        return list(zip(starts.tolist(), ends.tolist()))

    def chaining_violations(self) -> list[int]:
        same = self.episode[1:] == self.episode[:-1]
        broken = (self.s_next[:-1] != self.s[1:]) | (self.a_next[:-1] != self.a[1:])
        return [int(i) for i in np.flatnonzero(same & broken)]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.r))) if len(self) else 0.0

    def same_as(self, other: "OfflineDataset") -> bool:
        meta = (self.num_states, self.num_actions, self.source_env, self.source_seed)
        if meta != (other.num_states, other.num_actions, other.source_env, other.source_seed):
            return False
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in FIELDS)


def _columns(rows, num_states, num_actions, env, seed) -> OfflineDataset:
    cols = list(zip(*rows)) if rows else [[] for _ in FIELDS]
    return OfflineDataset(*[np.asarray(c) for c in cols], num_states=num_states,
                          num_actions=num_actions, source_env=env, source_seed=seed)


def generate_dataset(
    mdp: FiniteMdp, mu: PolicyTable, episodes: int, horizon: int, seed: int, env_name: str = "unknown"
) -> OfflineDataset:
    """Log ``episodes`` episodes of ``horizon`` behavior decisions each.

    Every decision (s_t, a_t) with t < horizon - 1 yields the transition
    (s_t, a_t, r_t, s_{t+1}, a_{t+1}); the final decision only closes the
    previous tuple, so an episode stores ``horizon - 1`` transitions.
    Episode ``k`` draws from the k-th child of ``SeedSequence(seed)``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rows = []
    for ep, child in enumerate(np.random.SeedSequence(seed).spawn(episodes)):
        rng = np.random.default_rng(child)
        s = sample_index(mdp.initial_dist, rng)
        a = sample_index(mu.probs[s], rng)
        for t in range(horizon - 1):
            s2 = sample_index(mdp.transition[s, a], rng)
            a2 = sample_index(mu.probs[s2], rng)
            rows.append((ep, t, s, a, float(mdp.reward[s, a]), s2, a2))
            s, a = s2, a2
    return _columns(rows, mdp.num_states, mdp.num_actions, env_name, seed)


def coverage_dataset(
    mdp: FiniteMdp, mu: PolicyTable, repeats: int, seed: int, env_name: str = "unknown"
) -> OfflineDataset:
    """Synthetic full-coverage data: every (s, a) appears ``repeats`` times.

    s' is drawn from the true dynamics and a' from ``mu``, so the SARSA
    continuation still belongs to the behavior policy. Each row is its own
    one-step episode.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    k = 0
    for _ in range(repeats):
        for s in range(mdp.num_states):
            for a in range(mdp.num_actions):
                s2 = sample_index(mdp.transition[s, a], rng)
                a2 = sample_index(mu.probs[s2], rng)
                rows.append((k, 0, s, a, float(mdp.reward[s, a]), s2, a2))
                k += 1
    return _columns(rows, mdp.num_states, mdp.num_actions, env_name, seed)


@dataclass(frozen=True)
class BehaviorEstimate:
    policy: PolicyTable
    visits: np.ndarray
    smoothing: float


def estimate_behavior(dataset: OfflineDataset, smoothing: float = DEFAULT_SMOOTHING,
                      use_next: bool = False) -> BehaviorEstimate:
    """Tabular behavior cloning: smoothed action frequencies, uniform at unvisited states.

    ``use_next`` counts the ``(s_next, a_next)`` columns instead. Those are
    behavior draws in every dataset, including :func:`coverage_dataset`,
    whose ``(s, a)`` columns are a design grid rather than behavior.
    """
    if not len(dataset):
        raise ValueError("dataset is empty")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    S, A = dataset.num_states, dataset.num_actions
    counts = np.zeros((S, A))
    s, a = (dataset.s_next, dataset.a_next) if use_next else (dataset.s, dataset.a)
    np.add.at(counts, (s, a), 1.0)
    visits = counts.sum(axis=1)
    probs = np.full((S, A), 1.0 / A)
    seen = visits > 0
    probs[seen] = (counts[seen] + smoothing) / (visits[seen, None] + smoothing * A)
    # renormalize so rows pass the 1e-12 probability check exactly
    probs /= probs.sum(axis=1, keepdims=True)
    return BehaviorEstimate(PolicyTable(probs), visits, smoothing)


@dataclass(frozen=True)
class CoverageReport:
    counts: np.ndarray
    fraction: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def coverage_report(dataset: OfflineDataset, mdp: FiniteMdp | None = None) -> CoverageReport:
    S = mdp.num_states if mdp is not None else dataset.num_states
    A = mdp.num_actions if mdp is not None else dataset.num_actions
    counts = np.zeros((S, A), dtype=np.int64)
    np.add.at(counts, (dataset.s, dataset.a), 1)
    return CoverageReport(counts, float(np.count_nonzero(counts)) / (S * A))


# --- file format --------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def write_dataset(dataset: OfflineDataset, path) -> None:
    path = Path(path)
    header = [
        HEADER_TAG,
        f"env={dataset.source_env}",
        f"seed={'' if dataset.source_seed is None else dataset.source_seed}",
        f"num_states={dataset.num_states}",
        f"num_actions={dataset.num_actions}",
        f"episodes={dataset.num_episodes}",
        f"transitions={len(dataset)}",
    ]
    lines = ["\t".join(header)]
    for i in range(len(dataset)):
        lines.append(
            f"{dataset.episode[i]}\t{dataset.step[i]}\t{dataset.s[i]}\t{dataset.a[i]}\t"
            f"{format(float(dataset.r[i]), '.17g')}\t{dataset.s_next[i]}\t{dataset.a_next[i]}"
        )
    path.write_text("\n".join(lines) + "\n")


def read_dataset(path) -> OfflineDataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(HEADER_TAG):
        raise DatasetFormatError(f"{path}: line 1: missing {HEADER_TAG} header")
    try:
        meta = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
        num_states = int(meta["num_states"])
        num_actions = int(meta["num_actions"])
        expected = int(meta["transitions"])
        env = meta["env"]
        seed = int(meta["seed"]) if meta.get("seed") else None
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: line 1: malformed header ({exc})") from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(FIELDS):
            raise DatasetFormatError(
                f"{path}: line {lineno}: expected {len(FIELDS)} fields, got {len(parts)} "
                f"(last good line {lineno - 1})"
            )
        try:
            ep, st, s, a = (int(x) for x in parts[:4])
            r = float(parts[4])
            s2, a2 = int(parts[5]), int(parts[6])
        except ValueError:
            raise DatasetFormatError(f"{path}: line {lineno}: unparsable field (last good line {lineno - 1})") from None
        rows.append((ep, st, s, a, r, s2, a2))
    if len(rows) != expected:
        raise DatasetFormatError(
            f"{path}: header promises {expected} transitions but file holds {len(rows)} "
            f"(last good line {len(rows) + 1})"
        )
    try:
        return _columns(rows, num_states, num_actions, env, seed)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
