"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (or ``-m acceptance``).
"""

import time
from pathlib import Path

import numpy as np
import pytest

from bcol.cli import main
from bcol.data import coverage_dataset
from bcol.dp import (
    BudgetedQ,
    budgeted_value_iteration,
    contraction_ratio,
    extract_greedy_budgeted_policy,
    standard_value_iteration,
)
from bcol.envs import builtin_env
from bcol.experiment import ExperimentSpec, behavior_estimate, evaluate_bcol, make_dataset, train_cell
from bcol.fitted import TrainConfig, train
from bcol.inference import ABLATION_MODES, ablation_policy, at_least_within, evaluate, rollout_bcol
from bcol.mdp import BudgetedPolicy, behavior_q
from bcol.oracle import enumeration_size, oracle_q_via_augmented_vi, oracle_q_via_enumeration

from conftest import gradient_check_errors, random_instances, random_mdp, random_policy

pytestmark = pytest.mark.acceptance

SPECS = Path(__file__).resolve().parent.parent / "specs"


@pytest.fixture
def verdict(capsys):
    def report(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return report


def acceptance_mdps():
    # the MDP set for the boundary and monotonicity criteria: random instances plus the built-ins
    out = random_instances(seed=101, count=50, max_s=10, max_a=4, max_b=3)
    for name in ("r_chain", "key_door_grid", "noisy_cliff"):
        mdp, mu = builtin_env(name)
        out.append((mdp, mu, 4))
    return out


def test_contraction_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_excess, count = -np.inf, 0
    for k in range(150):
        gamma = (0.5, 0.9, 0.99)[k % 3]
        S, A, B = int(rng.integers(1, 11)), int(rng.integers(1, 5)), int(rng.integers(0, 4))
        mdp = random_mdp(rng, S, A, gamma, sparse=bool(k % 2))
        mu = random_policy(rng, S, A)
        q1 = BudgetedQ(rng.normal(scale=5.0, size=(S, B + 1, A)))
        q2 = BudgetedQ(rng.normal(scale=5.0, size=(S, B + 1, A)))
        worst_excess = max(worst_excess, contraction_ratio(mdp, mu, q1, q2) - gamma)
        count += 1
    elapsed = time.perf_counter() - t0
    ok = count >= 100 and worst_excess <= 1e-12 and elapsed < 10
    verdict("contraction suite", ok, f"{count} instances, max(ratio - gamma) = {worst_excess:.3e}, {elapsed:.2f}s")


def test_optimality_certification(verdict):
    t0 = time.perf_counter()
    vi_gap = 0.0
    instances = random_instances(seed=202, count=60)
    for mdp, mu, B in instances:
        dp = budgeted_value_iteration(mdp, mu, B, tol=1e-12).q.values
        vi_gap = max(vi_gap, float(np.max(np.abs(oracle_q_via_augmented_vi(mdp, mu, B).values - dp))))
    tiny = [(m, mu, B) for m, mu, B in random_instances(seed=303, count=80, max_s=3, max_a=2, max_b=2)
            if 1 <= B and enumeration_size(m, B) <= 5000][:12]
    en_gap = 0.0
    for mdp, mu, B in tiny:
        dp = budgeted_value_iteration(mdp, mu, B, tol=1e-12).q.values
        en_gap = max(en_gap, float(np.max(np.abs(oracle_q_via_enumeration(mdp, mu, B).q.values - dp))))
    elapsed = time.perf_counter() - t0
    ok = vi_gap < 1e-7 and en_gap < 1e-7 and len(instances) >= 50 and len(tiny) >= 10 and elapsed < 60
    verdict("optimality certification", ok,
            f"augmented VI gap {vi_gap:.2e} on {len(instances)}, enumeration gap {en_gap:.2e} on {len(tiny)}, "
            f"{elapsed:.1f}s")


def test_boundary_slices(verdict):
    worst_zero, worst_slack = 0.0, -np.inf
    for mdp, mu, B in acceptance_mdps():
        q = budgeted_value_iteration(mdp, mu, B, tol=1e-12).q.values
        worst_zero = max(worst_zero, float(np.max(np.abs(q[:, 0] - behavior_q(mdp, mu)))))
        bound = mdp.discount**B * 2 * mdp.r_max / (1 - mdp.discount)
        gap = float(np.max(np.abs(q[:, B] - standard_value_iteration(mdp, 1e-12))))
        worst_slack = max(worst_slack, gap - bound)
    ok = worst_zero <= 1e-8 and worst_slack <= 1e-8
    verdict("boundary slices", ok, f"max |Q(.,0,.) - Q^mu| = {worst_zero:.2e}, max(gap - bound) = {worst_slack:.3e}")


def test_monotonicity(verdict):
    worst = 0.0
    cells = 0
    for mdp, mu, B in acceptance_mdps():
        q = budgeted_value_iteration(mdp, mu, B, tol=1e-12).q.values
        if B:
            worst = max(worst, float(np.max(q[:, :-1] - q[:, 1:])))
            cells += q[:, :-1].size
    verdict("monotonicity", worst <= 1e-10, f"max Q(s,b,a) - Q(s,b+1,a) = {worst:.2e} over {cells} cells")


def test_gradient_checks(verdict):
    errors = gradient_check_errors(points=120, seed=404)
    ok = all(len(v) >= 100 and max(v) < 1e-6 for v in errors.values())
    detail = ", ".join(f"{k} max rel err {max(v):.2e} ({len(v)} pts)" for k, v in errors.items())
    verdict("gradient checks", ok, detail)


def test_fitted_convergence(verdict):
    t0 = time.perf_counter()
    mdp, mu = builtin_env("r_chain")
    ds = coverage_dataset(mdp, mu, repeats=250, seed=0)
    exact = budgeted_value_iteration(mdp, mu, 1, tol=1e-12).q
    q1 = train(ds, TrainConfig(budget=1, steps=20_000, discount=mdp.discount))[0]
    q0 = train(ds, TrainConfig(budget=0, steps=20_000, discount=mdp.discount))[0]
    d1 = q1.q.sup_distance(exact)
    d0 = float(np.max(np.abs(q0.online[:, 0] - behavior_q(mdp, mu))))
    elapsed = time.perf_counter() - t0
    ok = len(ds) >= 1000 and d1 < 0.05 and d0 < 0.05 and elapsed < 120
    verdict("fitted convergence", ok,
            f"{len(ds)} transitions, B=1 distance {d1:.2e}, B=0 distance to Q^mu {d0:.2e}, {elapsed:.1f}s")


def test_budget_safety(verdict):
    rng = np.random.default_rng(505)
    rollouts = violations = 0
    for k in range(200):
        S, A, B = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(0, 4))
        mdp = random_mdp(rng, S, A, (0.5, 0.9, 0.99)[k % 3])
        mu_hat = random_policy(rng, S, A)
        if k % 2:
            q = budgeted_value_iteration(mdp, mu_hat, B).q
            pol = extract_greedy_budgeted_policy(q)
        else:
            # arbitrary tables: safety must not depend on Q being a fixed point
            q = BudgetedQ(rng.normal(size=(S, B + 1, A)))
            pol = BudgetedPolicy(random_policy(rng, S * (B + 1), A).probs.reshape(S, B + 1, A))
        for seed in range(50):
            traj = rollout_bcol(mdp, pol, mu_hat, q, B, 25, seed=(k, seed))
            rollouts += 1
            violations += traj.counterfactual_count > B or not traj.budget_bookkeeping_ok()
    verdict("budget safety", rollouts >= 10_000 and violations == 0, f"{rollouts} rollouts, {violations} violations")


def test_directional_ablation(verdict):
    spec = ExperimentSpec.load(SPECS / "key_door_ablation.json")
    mdp, mu = spec.make_env()
    ds = make_dataset(spec)
    mu_hat = behavior_estimate(spec, ds)
    omega = spec.train_config().omega
    reports, cells = {}, {}
    for B in (0, 1, 2, 4):
        cells[B] = train_cell(spec, ds, B, omega)
        reports[B] = evaluate_bcol(spec, mdp, mu_hat, cells[B])
    B = spec.train_config().budget
    q_unbudgeted = train(ds, spec.train_config(), unbudgeted=True)[0].online[:, 0]
    e = spec.eval
    lines, ok = [], spec.eval.episodes >= 300
    for mode in ABLATION_MODES:
        producer = ablation_policy(mode, mdp, e.horizon, B, mu_hat, q_unbudgeted, cells[B].policy.as_policy())
        rep = evaluate(mdp, producer, e.episodes, e.horizon, spec.eval_seed, label=mode)
        good = at_least_within(reports[B], rep)
        ok &= good
        lines.append(f"{mode} {rep.mean:.4f}{'' if good else ' (above bcol)'}")
    budgets = sorted(reports)
    monotone = all(at_least_within(reports[hi], reports[lo]) for lo, hi in zip(budgets, budgets[1:]))
    ok &= monotone
    curve = " ".join(f"B={b}:{reports[b].mean:.4f}" for b in budgets)
    verdict("directional ablation", ok,
            f"bcol(B={B}) {reports[B].mean:.4f} vs {', '.join(lines)}; {curve}"
            f"{'' if monotone else ' (not monotone)'}; {e.episodes} episodes each")


def test_end_to_end_determinism(verdict, tmp_path):
    spec = SPECS / "rchain.json"
    outs = []
    for run in ("a", "b"):
        code = main(["train", "--spec", str(spec), "--out", str(tmp_path / run), "--quiet",
                     "--steps", "5000", "--eval-episodes", "300", "--eval-horizon", "200"])
        outs.append((code, (tmp_path / run / "results.csv").read_bytes(), (tmp_path / run / "eval.csv").read_bytes()))
    ok = outs[0][0] == outs[1][0] == 0 and outs[0][1:] == outs[1][1:]
    verdict("end-to-end determinism", ok, f"results.csv {len(outs[0][1])} bytes, identical={outs[0][1] == outs[1][1]}")
