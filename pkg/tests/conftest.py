import numpy as np
import pytest

from bcol.envs import builtin_env
from bcol.mdp import FiniteMdp, PolicyTable


def random_mdp(rng: np.random.Generator, S: int, A: int, gamma: float, sparse: bool = False) -> FiniteMdp:
    p = rng.random((S, A, S))
    if sparse:
        p *= rng.random((S, A, S)) < 0.5
        p[np.arange(S)[:, None], np.arange(A)[None, :], rng.integers(0, S, (S, A))] += 1.0
    p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, (S, A))
    p0 = rng.random(S)
    return FiniteMdp(r, p, p0 / p0.sum(), gamma)


def random_policy(rng: np.random.Generator, S: int, A: int, deterministic: bool = False) -> PolicyTable:
    if deterministic:
        return PolicyTable.deterministic(rng.integers(0, A, S), A)
    w = rng.random((S, A)) ** 3
    return PolicyTable(w / w.sum(axis=1, keepdims=True))


def random_instances(seed: int, count: int, max_s: int = 8, max_a: int = 4, max_b: int = 3,
                     gammas=(0.5, 0.9, 0.99)):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        S = int(rng.integers(1, max_s + 1))
        A = int(rng.integers(1, max_a + 1))
        B = int(rng.integers(0, max_b + 1))
        gamma = gammas[k % len(gammas)]
        mdp = random_mdp(rng, S, A, gamma, sparse=bool(k % 2))
        mu = random_policy(rng, S, A, deterministic=bool(k % 3 == 0))
        out.append((mdp, mu, B))
    return out


@pytest.fixture
def rchain():
    return builtin_env("r_chain")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Elementwise central-difference gradient of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if scale == 0 else float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check_errors(points: int, seed: int) -> dict:
    """Relative errors of the three analytic gradients against central differences at random points."""
    from bcol.fitted import Minibatch, SoftPolicyParams, monotonicity_penalty, policy_loss, td_loss

    rng = np.random.default_rng(seed)
    out = {"L_Q": [], "L_pi": [], "penalty": []}
    for _ in range(points):
        S, H, A = int(rng.integers(1, 5)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
        n = int(rng.integers(1, 12))
        batch = Minibatch(rng.integers(0, S, n), rng.integers(0, A, n), rng.normal(size=n),
                          rng.integers(0, S, n), rng.integers(0, A, n))
        theta = rng.normal(size=(S, H, A))
        # the hinge is not differentiable at a zero gap; keep every adjacent gap clear of it
        while np.min(np.abs(np.diff(theta, axis=1))) < 1e-3:
            theta = rng.normal(size=(S, H, A))
        y = rng.normal(size=(n, H))
        _, g = td_loss(theta, y, batch)
        out["L_Q"].append(relative_error(g, central_difference(lambda x: td_loss(x, y, batch)[0], theta)))

        logits = rng.normal(size=(S, H, A))
        _, g = policy_loss(SoftPolicyParams(logits), theta, batch.s)
        num = central_difference(lambda z: policy_loss(SoftPolicyParams(z), theta, batch.s)[0], logits)
        out["L_pi"].append(relative_error(g, num))

        pol = SoftPolicyParams(logits)
        draw = int(rng.integers(2**31))

        def pen(x):
            # same seed every call, so the sampled actions are fixed while differencing
            return monotonicity_penalty(x, pol, batch.s, np.random.default_rng(draw), 3.0)

        out["penalty"].append(relative_error(pen(theta)[1], central_difference(lambda x: pen(x)[0], theta, 1e-6)))
    return out
