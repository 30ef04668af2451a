import math

import numpy as np
import pytest

from bcol.dp import BudgetedQ, budgeted_value_iteration, counterfactual_branch, extract_greedy_budgeted_policy
from bcol.envs import LEFT, RIGHT, builtin_env
from bcol.inference import (
    ABLATION_MODES,
    EvalReport,
    ablation_policy,
    at_least_within,
    behavior_gap,
    behavior_producer,
    bcol_producer,
    evaluate,
    rollout_bcol,
    select,
)
from bcol.mdp import BudgetedPolicy, PolicyTable, evaluate_policy_exact, follow, rollout

from conftest import random_instances, random_mdp, random_policy


@pytest.fixture
def rchain_solution(rchain):
    mdp, mu = rchain
    q = budgeted_value_iteration(mdp, mu, 1, tol=1e-12).q
    return mdp, mu, q, extract_greedy_budgeted_policy(q)


def test_select_budget_zero(rchain_solution):
    _, mu, q, pol = rchain_solution
    d = select(pol, mu, 0, 0, q)
    assert not d.was_counterfactual and d.new_budget == 0
    assert np.array_equal(d.probs, mu.probs[0]) and d.value_cf == -math.inf


def test_select_tie_follows_mu():
    q = BudgetedQ(np.ones((1, 2, 2)))
    d = select(BudgetedPolicy(np.full((1, 2, 2), 0.5)), PolicyTable.uniform(1, 2), 0, 1, q)
    assert d.value_cf == d.value_mu and not d.was_counterfactual and d.new_budget == 1


def test_select_rchain_spends(rchain_solution):
    _, mu, q, pol = rchain_solution
    d = select(pol, mu, 0, 1, q)
    assert d.value_cf == pytest.approx(1.0, abs=1e-10)
    assert d.value_mu == pytest.approx(0.5, abs=1e-10)
    assert d.was_counterfactual and d.new_budget == 0
    assert np.array_equal(d.probs, [0.0, 1.0])


def test_select_budget_out_of_range(rchain_solution):
    _, mu, q, pol = rchain_solution
    with pytest.raises(IndexError):
        select(pol, mu, 0, 2, q)


@pytest.mark.parametrize("mdp,mu,B", random_instances(seed=31, count=15, max_b=3))
def test_select_consistent_with_operator(mdp, mu, B):
    q = budgeted_value_iteration(mdp, mu, B, tol=1e-12).q
    pol = extract_greedy_budgeted_policy(q)
    branch = counterfactual_branch(q, mu)
    for s in range(mdp.num_states):
        for b in range(B + 1):
            d = select(pol, mu, s, b, q)
            # a near-tie may land either way from rounding; everything else must agree
            if b > 0 and abs(d.value_cf - d.value_mu) < 1e-9:
                continue
            assert d.was_counterfactual == bool(branch[s, b])
            assert d.was_counterfactual == (d.new_budget == b - 1)


def test_budget_zero_is_mu_rollout(rng):
    mdp = random_mdp(rng, 5, 3, 0.9)
    mu = random_policy(rng, 5, 3)
    q = budgeted_value_iteration(mdp, mu, 0).q
    pol = extract_greedy_budgeted_policy(q)
    for seed in range(5):
        assert rollout_bcol(mdp, pol, mu, q, 0, 50, seed) == rollout(mdp, follow(mu), 50, seed)


def test_rchain_rollout(rchain_solution):
    mdp, mu, q, pol = rchain_solution
    traj = rollout_bcol(mdp, pol, mu, q, 1, 30, seed=0, start_state=0)
    assert traj.steps[0].counterfactual and traj.steps[0].action == RIGHT
    assert all(not st.counterfactual and st.action == LEFT for st in traj.steps[1:])
    assert traj.return_discounted >= 1.0 - mdp.truncation_bias(30)


def test_rollout_budget_beyond_table(rchain_solution):
    mdp, mu, q, pol = rchain_solution
    with pytest.raises(ValueError):
        rollout_bcol(mdp, pol, mu, q, 2, 10, seed=0)


def test_budget_safety_sample():
    rng = np.random.default_rng(77)
    for k in range(200):
        S, A, B = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(0, 4))
        mdp = random_mdp(rng, S, A, 0.9)
        mu = random_policy(rng, S, A)
        q = BudgetedQ(rng.normal(size=(S, B + 1, A)))  # arbitrary, even non-monotone, tables
        pol = BudgetedPolicy(random_policy(rng, S * (B + 1), A).probs.reshape(S, B + 1, A))
        traj = rollout_bcol(mdp, pol, mu, q, B, 20, seed=k)
        assert traj.counterfactual_count <= B and traj.budget_bookkeeping_ok()


def test_evaluate_deterministic_zero_std(rchain):
    mdp, _ = rchain
    det = PolicyTable.deterministic([RIGHT, RIGHT], 2)
    rep = evaluate(mdp, behavior_producer(mdp, det, 20), 10, 20, seed=0)
    assert rep.std == 0.0 and rep.episodes == 10
    assert rep.mean_counterfactuals == 0.0


def test_evaluate_matches_exact(rng):
    mdp = random_mdp(rng, 4, 3, 0.9)
    mu = random_policy(rng, 4, 3)
    v = evaluate_policy_exact(mdp, mu) @ mdp.initial_dist
    horizon = 150
    rep = evaluate(mdp, behavior_producer(mdp, mu, horizon), 2000, horizon, seed=3)
    assert abs(rep.mean - v) <= 3 * rep.stderr + rep.truncation_bias


def test_evaluate_budget_zero_counts(rng):
    mdp = random_mdp(rng, 3, 2, 0.9)
    mu = random_policy(rng, 3, 2)
    q = budgeted_value_iteration(mdp, mu, 0).q
    rep = evaluate(mdp, bcol_producer(mdp, extract_greedy_budgeted_policy(q), mu, q, 0, 30), 50, 30, seed=0)
    assert np.all(rep.counterfactuals == 0)
    assert rep.exhaustion_histogram() == {"never": 50}


def test_evaluate_rejects_zero_episodes(rchain):
    with pytest.raises(ValueError):
        evaluate(rchain[0], behavior_producer(*rchain, 5), 0, 5, seed=0)


def test_evaluate_seeds_reproducible(rng):
    mdp = random_mdp(rng, 4, 2, 0.9)
    mu = random_policy(rng, 4, 2)
    a = evaluate(mdp, behavior_producer(mdp, mu, 30), 20, 30, seed=8)
    b = evaluate(mdp, behavior_producer(mdp, mu, 30), 20, 30, seed=8)
    assert a.to_csv() == b.to_csv()


def test_csv_layout(rchain_solution):
    mdp, mu, q, pol = rchain_solution
    rep = evaluate(mdp, bcol_producer(mdp, pol, mu, q, 1, 10), 3, 10, seed=0, behavior_gap=0.0)
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("row,episode,discounted_return")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["episode"] * 3 + ["mean", "std", "truncation_bias", "behavior_gap"]
    assert rep.exhaustion_histogram() == {0: 3}


def test_behavior_gap():
    assert behavior_gap(PolicyTable([[1.0, 0.0]]), PolicyTable([[0.75, 0.25]])) == pytest.approx(0.5)


def test_at_least_within():
    a = EvalReport(np.array([1.0, 1.0]), np.zeros(2), np.zeros(2), [None, None], 0.0)
    b = EvalReport(np.array([1.0, 3.0]), np.zeros(2), np.zeros(2), [None, None], 0.0)
    assert at_least_within(b, a) and at_least_within(a, b)  # se of b is 1/sqrt(2)
    assert not at_least_within(a, b, sigmas=1.0)


# --- ablations ----------------------------------------------------------------


def test_unknown_mode(rchain):
    with pytest.raises(ValueError, match="no_budgeting"):
        ablation_policy("greedy", rchain[0], 10, 1, rchain[1])


@pytest.mark.parametrize("mode", ["random_budget_unplanned", "random_budget_trained"])
def test_random_modes_budget(mode, rchain_solution):
    mdp, mu, q, pol = rchain_solution
    q_star = np.array([[1.0, 2.0], [1.0, 2.0]])
    for B, horizon in [(1, 10), (3, 3), (5, 3)]:
        produce = ablation_policy(mode, mdp, horizon, B, mu, q_star, BudgetedPolicy(np.full((2, B + 1, 2), 0.5)))
        for seed in range(20):
            traj = produce(seed)
            assert traj.counterfactual_count <= B and traj.budget_bookkeeping_ok()
            if B >= horizon:
                assert all(st.counterfactual for st in traj.steps)
            else:
                assert traj.counterfactual_count == B


def test_no_budgeting_is_greedy(rchain):
    mdp, mu = rchain
    traj = ablation_policy("no_budgeting", mdp, 10, 1, mu, np.array([[1.0, 2.0], [1.0, 2.0]]))(0)
    assert all(st.action == RIGHT and st.counterfactual for st in traj.steps)


def test_random_trained_tracks_spend():
    mdp, mu = builtin_env("r_chain")
    # head 0 plays L, head 1 plays R: the first spend of a budget-2 rollout uses head 1
    probs = np.zeros((2, 3, 2))
    probs[:, 0, LEFT] = probs[:, 1, RIGHT] = probs[:, 2, LEFT] = 1.0
    traj = ablation_policy("random_budget_trained", mdp, 2, 2, mu, policy=BudgetedPolicy(probs))(0)
    assert [st.action for st in traj.steps] == [RIGHT, LEFT]


def test_mode_names():
    assert ABLATION_MODES == ("no_budgeting", "random_budget_unplanned", "random_budget_trained")


@pytest.mark.parametrize("env", ["r_chain", "key_door_grid", "noisy_cliff"])
def test_exact_value_monotone_in_budget(env):
    mdp, mu = builtin_env(env)
    horizon, episodes = 40, 300
    reports = []
    for B in (0, 1, 2, 4):
        q = budgeted_value_iteration(mdp, mu, B).q
        producer = bcol_producer(mdp, extract_greedy_budgeted_policy(q), mu, q, B, horizon)
        reports.append(evaluate(mdp, producer, episodes, horizon, seed=11))
    for lo, hi in zip(reports, reports[1:]):
        assert at_least_within(hi, lo)
