"""Built-in desk-scale environments, each paired with its behavior policy."""

from __future__ import annotations

import numpy as np

from .mdp import FiniteMdp, PolicyTable, validate_mdp

LEFT, RIGHT = 0, 1
ADVANCE, GRAB = 0, 1
FORWARD, SWITCH = 0, 1


def r_chain(discount: float = 0.5) -> tuple[FiniteMdp, PolicyTable]:
    """Two states, actions L/R. R pays 1 and moves to (or stays in) state 1; L pays 0.

    State 1 is absorbing under both actions. The behavior policy always plays L.
    """
    reward = np.array([[0.0, 1.0], [0.0, 1.0]])
    p = np.zeros((2, 2, 2))
    p[0, LEFT, 0] = 1.0
    p[0, RIGHT, 1] = 1.0
    p[1, :, 1] = 1.0
    mdp = FiniteMdp(reward, p, np.array([1.0, 0.0]), discount)
    return mdp, PolicyTable.deterministic([LEFT, LEFT], 2)


def key_door_positions(length: int, K: int) -> list[int]:
    return [round((j + 1) * (length - 1) / (K + 1)) for j in range(K)]


def key_door_grid(
    K: int = 2,
    length: int = 8,
    epsilon: float = 0.2,
    goal_reward: float = 1.0,
    key_reward: float = 0.0,
    discount: float = 0.99,
) -> tuple[FiniteMdp, PolicyTable]:
    """Corridor of ``length`` cells crossed with a key counter 0..K.

    Cell ``(pos, keys)`` has index ``keys * length + pos``; the last index is an
    absorbing terminal. ADVANCE moves one cell right. GRAB does the same but,
    on one of the K key cells, also picks up a key. Leaving the last cell pays
    ``goal_reward`` only when all K keys are held. The behavior policy plays
    ADVANCE with probability ``1 - epsilon`` everywhere, so the only states
    where deviating pays off are the K key cells on the route.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if length < K + 2:
        raise ValueError(f"length must be >= K + 2 = {K + 2}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1) so the data covers both actions")
    keys_at = set(key_door_positions(length, K))
    S = length * (K + 1) + 1
    terminal = S - 1
    reward = np.zeros((S, 2))
    p = np.zeros((S, 2, S))
    for keys in range(K + 1):
        for pos in range(length):
            s = keys * length + pos
            if pos == length - 1:
                p[s, :, terminal] = 1.0
                reward[s, :] = goal_reward if keys == K else 0.0
                continue
            p[s, ADVANCE, s + 1] = 1.0
            if pos in keys_at and keys < K:
                p[s, GRAB, (keys + 1) * length + pos + 1] = 1.0
                reward[s, GRAB] = key_reward
            else:
                p[s, GRAB, s + 1] = 1.0
    p[terminal, :, terminal] = 1.0
    p0 = np.zeros(S)
    p0[0] = 1.0
    mu = np.tile([1.0 - epsilon, epsilon], (S, 1))
    return FiniteMdp(reward, p, p0, discount), PolicyTable(mu)


def noisy_cliff(
    width: int = 6,
    slip: float = 0.15,
    safe_progress: float = 0.5,
    epsilon: float = 0.1,
    discount: float = 0.99,
) -> tuple[FiniteMdp, PolicyTable]:
    """Two lanes of ``width`` cells plus an absorbing goal.

    Index ``lane * width + x``; lane 0 is safe, lane 1 runs along the cliff.
    FORWARD on the safe lane advances with probability ``safe_progress``;
    on the cliff lane it always advances but falls with probability ``slip``
    (reward -1, back to the start). SWITCH changes lane in place. Reaching
    x = width - 1 pays +1 and ends in the goal. The behavior policy walks
    the safe lane and returns to it when it strays.
    """
    if width < 2:
        raise ValueError("width must be >= 2")
    S = 2 * width + 1
    goal = S - 1
    reward = np.zeros((S, 2))
    p = np.zeros((S, 2, S))
    for lane in (0, 1):
        for x in range(width):
            s = lane * width + x
            other = (1 - lane) * width + x
            if x == width - 1:
                p[s, :, goal] = 1.0
                reward[s, :] = 1.0
                continue
            p[s, SWITCH, other] = 1.0
            if lane == 0:
                p[s, FORWARD, s + 1] = safe_progress
                p[s, FORWARD, s] = 1.0 - safe_progress
            else:
                p[s, FORWARD, s + 1] = 1.0 - slip
                p[s, FORWARD, 0] = slip
                reward[s, FORWARD] = -slip
    p[goal, :, goal] = 1.0
    p0 = np.zeros(S)
    p0[0] = 1.0
    mu = np.empty((S, 2))
    mu[:width] = [1.0 - epsilon, epsilon]
    mu[width : 2 * width] = [epsilon, 1.0 - epsilon]
    mu[goal] = [1.0, 0.0]
    return FiniteMdp(reward, p, p0, discount), PolicyTable(mu)


ENVIRONMENTS = {
    "r_chain": r_chain,
    "key_door_grid": key_door_grid,
    "noisy_cliff": noisy_cliff,
}


class UnknownEnvironment(KeyError):
    def __str__(self) -> str:
        return f"unknown environment {self.args[0]!r}; available: {', '.join(sorted(ENVIRONMENTS))}"


def builtin_env(name: str, **params) -> tuple[FiniteMdp, PolicyTable]:
    try:
        ctor = ENVIRONMENTS[name]
    except KeyError:
        raise UnknownEnvironment(name) from None
    mdp, mu = ctor(**params)
    report = validate_mdp(mdp)
    if not report.ok:
        raise ValueError(f"{name} produced an invalid MDP: {report.violations}")
    return mdp, mu
