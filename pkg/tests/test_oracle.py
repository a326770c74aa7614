"""Exact-solver tests: value iteration, the dual bisection against
exhaustive enumeration, the penalized optimizer, and both theorem-level
checks."""

import itertools

import numpy as np
import pytest

from cmdplab import oracle as orc
from cmdplab.envs import PondWorld, PondWorldConfig, TabularCMDP
from cmdplab.errors import ParameterError

# frozen: the hand-computed worked example of the assembled bound
WORKED_BOUND = 51.66294361119891


def chain_cmdp(gamma=0.9):
    """Two states, two actions: stay cheaply or advance at a cost."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0   # stay
    P[0, 1, 1] = 1.0   # advance
    P[1, :, 1] = 1.0   # absorbing
    R = np.array([[0.1, 1.0], [0.5, 0.5]])
    C = np.array([[0.0, 1.0], [0.0, 0.0]])
    rho = np.array([1.0, 0.0])
    return TabularCMDP(2, 2, P, R, C, gamma, rho)


def enumerate_policies(cmdp):
    out = []
    for acts in itertools.product(range(cmdp.n_actions),
                                  range(cmdp.n_actions)) \
            if cmdp.n_states == 2 else itertools.product(
                range(cmdp.n_actions), repeat=cmdp.n_states):
        pi = orc.deterministic_policy_matrix(np.array(acts),
                                             cmdp.n_actions)
        ev = orc.policy_evaluation(cmdp, pi)
        out.append((np.array(acts), ev))
    return out


def brute_constrained(cmdp, d, lam_hi=64.0):
    """Independent oracle: policy enumeration plus a bisected lambda grid,
    mixing the two frontier vertices at the budget."""
    evs = enumerate_policies(cmdp)
    jr = np.array([e.j_r for _, e in evs])
    jc = np.array([e.j_c[0] for _, e in evs])
    feas = jc <= d + 1e-9
    if not feas.any():
        return None

    def opt_set(lam):
        score = jr - lam * jc
        return np.where(score >= score.max() - 1e-11)[0]

    if feas[opt_set(0.0)].any():
        i = max(opt_set(0.0), key=lambda k: (feas[k], jr[k]))
        return {"lam": 0.0, "j_r": jr[i], "j_c": jc[i]}
    lo, hi = 0.0, lam_hi
    assert feas[opt_set(hi)].any(), "enumeration bracket too small"
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if feas[opt_set(mid)].any():
            hi = mid
        else:
            lo = mid
    i_hi = max((k for k in opt_set(hi) if feas[k]), key=lambda k: jr[k])
    cands_lo = [k for k in opt_set(lo) if not feas[k]]
    if not cands_lo:
        return {"lam": 0.5 * (lo + hi), "j_r": jr[i_hi], "j_c": jc[i_hi]}
    i_lo = max(cands_lo, key=lambda k: jr[k])
    w = np.clip((d - jc[i_hi]) / (jc[i_lo] - jc[i_hi]), 0.0, 1.0)
    return {"lam": 0.5 * (lo + hi),
            "j_r": w * jr[i_lo] + (1 - w) * jr[i_hi],
            "j_c": w * jc[i_lo] + (1 - w) * jc[i_hi]}


# -- policy evaluation / value iteration -------------------------------------


def test_value_iteration_zero_rewards():
    cmdp, _ = orc.random_binding_cmdp(0, n_states=4, n_actions=2)
    v, _ = orc.value_iteration(cmdp, np.zeros((4, 2)))
    assert np.allclose(v, 0.0, atol=1e-12)


def test_value_iteration_single_state_geometric_series():
    cmdp = TabularCMDP(1, 1, np.ones((1, 1, 1)), np.ones((1, 1)),
                       np.zeros((1, 1)), 0.9, np.ones(1))
    v, greedy = orc.value_iteration(cmdp, cmdp.reward)
    assert v[0] == pytest.approx(10.0, abs=1e-9)
    assert greedy[0] == 0


def test_value_iteration_two_state_closed_form():
    cmdp = chain_cmdp(0.9)
    v, greedy = orc.value_iteration(cmdp, cmdp.reward)
    # best from state 1: 0.5 / (1 - 0.9) = 5; from state 0: 1 + 0.9*5 = 5.5
    assert v[1] == pytest.approx(5.0, abs=1e-9)
    assert v[0] == pytest.approx(5.5, abs=1e-9)
    assert np.array_equal(greedy, [1, 0])  # ties at state 1 -> lowest index


def test_vi_sweep_contracts_by_gamma():
    cmdp, _ = orc.random_binding_cmdp(3, n_states=5, n_actions=3, gamma=0.9)
    v_star, _ = orc.value_iteration(cmdp, cmdp.reward)
    v = np.zeros(5)
    err = np.max(np.abs(v - v_star))
    for _ in range(30):
        v = orc.vi_sweep(cmdp, cmdp.reward, v)
        new_err = np.max(np.abs(v - v_star))
        assert new_err <= cmdp.gamma * err + 1e-12
        err = new_err


def test_policy_evaluation_consistency():
    cmdp, _ = orc.random_binding_cmdp(1, n_states=4, n_actions=3)
    rng = np.random.default_rng(0)
    pi = rng.dirichlet(np.ones(3), size=4)
    ev = orc.policy_evaluation(cmdp, pi)
    # V = sum_a pi(a) Q(a); advantages are centered under the policy
    assert np.allclose((pi * ev.q_r).sum(axis=1), ev.v_r, atol=1e-10)
    assert np.allclose((pi * ev.adv_r).sum(axis=1), 0.0, atol=1e-10)
    assert ev.occupancy.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.all(ev.occupancy >= -1e-12)
    # J equals both rho'V and the occupancy contraction
    assert ev.j_r == pytest.approx(float(cmdp.rho @ ev.v_r), abs=1e-12)
    mu = ev.occupancy[:, None] * pi
    assert ev.j_r == pytest.approx(
        float((mu * cmdp.reward).sum()) / (1 - cmdp.gamma), abs=1e-9)


# -- solve_dual -----------------------------------------------------------------


def test_solve_dual_zero_costs_is_unconstrained():
    cmdp, _ = orc.random_binding_cmdp(2, n_states=4, n_actions=2)
    cmdp = TabularCMDP(4, 2, cmdp.transition, cmdp.reward,
                       np.zeros((4, 2)), cmdp.gamma, cmdp.rho)
    sol = orc.solve_dual(cmdp, d=0.5)
    v, greedy = orc.value_iteration(cmdp, cmdp.reward)
    assert sol.feasible
    assert sol.lambda_star[0] == 0.0
    assert sol.j_r_star == pytest.approx(float(cmdp.rho @ v), abs=1e-9)


def test_solve_dual_slack_budget_gives_zero_multiplier():
    cmdp, _ = orc.random_binding_cmdp(4, n_states=4, n_actions=3)
    _, greedy = orc.value_iteration(cmdp, cmdp.reward)
    ev = orc.policy_evaluation(
        cmdp, orc.deterministic_policy_matrix(greedy, 3))
    sol = orc.solve_dual(cmdp, d=ev.j_c[0] + 1.0)
    assert sol.lambda_star[0] == 0.0
    assert sol.j_r_star == pytest.approx(ev.j_r, abs=1e-9)


def test_solve_dual_infeasible_budget():
    cmdp, _ = orc.random_binding_cmdp(5, n_states=4, n_actions=2)
    sol = orc.solve_dual(cmdp, d=-1.0)  # costs are nonnegative
    assert not sol.feasible


def test_solve_dual_two_state_binding_vs_brute_force():
    cmdp = chain_cmdp(0.9)
    # unconstrained optimum advances (J_C = 1); forbid most of it
    d = 0.4
    sol = orc.solve_dual(cmdp, d)
    bf = brute_constrained(cmdp, d)
    assert sol.feasible
    assert sol.lambda_star[0] == pytest.approx(bf["lam"], abs=1e-6)
    assert sol.j_r_star == pytest.approx(bf["j_r"], abs=1e-9)
    assert sol.j_c_star[0] == pytest.approx(d, abs=1e-9)
    # the mixed policy evaluates exactly to the reported optimum
    ev = orc.policy_evaluation(cmdp, sol.policy_star)
    assert ev.j_r == pytest.approx(sol.j_r_star, abs=1e-9)
    assert ev.j_c[0] == pytest.approx(sol.j_c_star[0], abs=1e-9)


@pytest.mark.slow
def test_solve_dual_dominates_deterministic_and_slackness_100_seeds():
    for seed in range(100):
        cmdp, d = orc.random_binding_cmdp(seed, n_states=4, n_actions=3,
                                          gamma=0.9)
        sol = orc.solve_dual(cmdp, d)
        assert sol.feasible
        evs = enumerate_policies(cmdp)
        best_det = max((e.j_r for _, e in evs if e.j_c[0] <= d + 1e-9),
                       default=-np.inf)
        assert sol.j_r_star >= best_det - 1e-9
        assert sol.lambda_star[0] >= 0.0
        slack = sol.lambda_star[0] * (sol.j_c_star[0] - d)
        assert abs(slack) < 1e-6


def test_solve_dual_rejects_multi_constraint():
    cmdp, d = orc.random_binding_cmdp(0, n_states=3, n_actions=2)
    twin = TabularCMDP(3, 2, cmdp.transition, cmdp.reward,
                       np.stack([cmdp.cost[0], cmdp.cost[0]]),
                       cmdp.gamma, cmdp.rho)
    with pytest.raises(ParameterError):
        orc.solve_dual(twin, d)


# -- exact penalized optimization ---------------------------------------------------


def test_surrogate_eta_zero_recovers_unconstrained_optimum():
    cmdp, d = orc.random_binding_cmdp(7, n_states=4, n_actions=3)
    v, greedy = orc.value_iteration(cmdp, cmdp.reward)
    pi, trace, converged = orc.exact_surrogate_optimize(cmdp, d, eta=0.0,
                                                        alpha=0.02)
    ev = orc.policy_evaluation(cmdp, pi)
    assert converged
    assert ev.j_r == pytest.approx(float(cmdp.rho @ v), abs=1e-6)
    assert len(trace) > 0


def test_surrogate_inactive_constraint_insensitive_to_eta():
    cmdp, _ = orc.random_binding_cmdp(8, n_states=4, n_actions=2)
    _, greedy = orc.value_iteration(cmdp, cmdp.reward)
    ev0 = orc.policy_evaluation(
        cmdp, orc.deterministic_policy_matrix(greedy, 2))
    d = ev0.j_c[0] + 3.0  # strictly feasible optimum
    for eta in (0.0, 1.0, 10.0):
        pi, _, _ = orc.exact_surrogate_optimize(cmdp, d, eta, alpha=0.02)
        ev = orc.policy_evaluation(cmdp, pi)
        assert ev.j_r == pytest.approx(ev0.j_r, rel=2e-4)


def test_surrogate_binding_recovers_constrained_optimum():
    cmdp, d = orc.random_binding_cmdp(11, n_states=5, n_actions=3)
    sol = orc.solve_dual(cmdp, d)
    eta = 2.0 * sol.lambda_star[0]
    pi, _, converged = orc.exact_surrogate_optimize(
        cmdp, d, eta, alpha=0.02, starts=orc.default_starts(cmdp, sol))
    ev = orc.policy_evaluation(cmdp, pi)
    assert converged
    assert ev.j_r >= 0.98 * sol.j_r_star
    assert ev.j_c[0] <= d + 1e-3


def test_penalized_gradient_matches_finite_differences():
    cmdp, d = orc.random_binding_cmdp(13, n_states=4, n_actions=3)
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(12) * 0.5
    eta, alpha = 1.3, 0.5

    def f(t):
        pi = orc._softmax_rows(t.reshape(4, 3))
        return orc.penalized_objective(cmdp, d, eta, alpha, None, pi)

    # closure from the optimizer internals
    pi = orc._softmax_rows(theta.reshape(4, 3))
    ev = orc.policy_evaluation(cmdp, pi)
    from cmdplab.penalty import PenaltyConfig, PenaltyKind, penalty_grad
    cfg = PenaltyConfig(alpha=alpha)
    coef = -ev.adv_r + (eta / (1 - cmdp.gamma)) * penalty_grad(
        PenaltyKind.CELU, ev.j_c[0] - d, cfg) * ev.adv_c[0]
    grad = (ev.occupancy[:, None] * pi * coef).ravel()

    step = 1e-6
    fd = np.array([(f(theta + step * e) - f(theta - step * e)) / (2 * step)
                   for e in np.eye(12)])
    assert np.max(np.abs(grad - fd)) < 1e-7


# -- theorem 1 ------------------------------------------------------------------------


def test_verify_theorem1_binding_grid():
    cmdp, d = orc.random_binding_cmdp(17, n_states=4, n_actions=3)
    report = orc.verify_theorem1(cmdp, d)
    assert report["applicable"]
    lam = report["lambda_star"]
    assert lam > 0
    etas = [r["eta"] for r in report["rows"]]
    assert etas == pytest.approx([0.5 * lam, lam, 2 * lam, 10 * lam])
    required = [r for r in report["rows"] if r["required"]]
    assert {round(r["eta"] / lam) for r in required} == {2, 10}
    assert report["passed"]
    assert all(r["pass"] for r in required)


def test_verify_theorem1_slack_constraint_passes_everywhere():
    cmdp, _ = orc.random_binding_cmdp(19, n_states=4, n_actions=2)
    _, greedy = orc.value_iteration(cmdp, cmdp.reward)
    ev0 = orc.policy_evaluation(
        cmdp, orc.deterministic_policy_matrix(greedy, 2))
    report = orc.verify_theorem1(cmdp, ev0.j_c[0] + 2.0)
    assert report["applicable"]
    assert report["lambda_star"] == 0.0
    assert all(r["pass"] for r in report["rows"])
    assert report["passed"]


def test_verify_theorem1_infeasible_not_applicable():
    cmdp, _ = orc.random_binding_cmdp(23, n_states=4, n_actions=2)
    report = orc.verify_theorem1(cmdp, -5.0)
    assert not report["applicable"]
    assert report["passed"] is None


# -- lemma-2 fixed-point inequality ----------------------------------------------------


def test_constrained_optimum_is_near_fixed_point_of_penalized_objective():
    """Anchored at the constrained optimum pi_hat, no policy improves the
    penalized surrogate by more than the CELU incentive slack m*eta*alpha
    (which vanishes as alpha -> 0)."""
    for seed in (29, 31):
        cmdp, d = orc.random_binding_cmdp(seed, n_states=4, n_actions=3)
        sol = orc.solve_dual(cmdp, d)
        eta = 2.0 * sol.lambda_star[0]
        for alpha in (0.02, 0.2):
            pi_bar, _, _ = orc.exact_surrogate_optimize(
                cmdp, d, eta, alpha, starts=orc.default_starts(cmdp, sol))
            l_hat = orc.anchored_penalized_loss(
                cmdp, sol.policy_star, sol.policy_star, d, eta, alpha)
            l_bar = orc.anchored_penalized_loss(
                cmdp, sol.policy_star, pi_bar, d, eta, alpha)
            assert l_hat <= l_bar + eta * alpha + 1e-9
        # the slack collapses below 1e-6 for tiny alpha
        alpha = 1e-6
        pi_bar, _, _ = orc.exact_surrogate_optimize(
            cmdp, d, eta, alpha, starts=orc.default_starts(cmdp, sol))
        l_hat = orc.anchored_penalized_loss(
            cmdp, sol.policy_star, sol.policy_star, d, eta, alpha)
        l_bar = orc.anchored_penalized_loss(
            cmdp, sol.policy_star, pi_bar, d, eta, alpha)
        assert l_hat <= l_bar + 1e-6


# -- theorem 2 bound --------------------------------------------------------------------


def test_assemble_bound_worked_example():
    rep = orc.assemble_bound(epsilon_r=1.0, epsilon_c=[1.0], delta=0.02,
                             gamma=0.9, eta=20.0, alpha=1.0, h=0.5)
    assert rep.assembled_bound == pytest.approx(WORKED_BOUND, abs=1e-9)


def test_assemble_bound_limits_and_monotonicity():
    # delta = 0 and h -> 1 kill both terms
    rep = orc.assemble_bound(1.0, [1.0], 0.0, 0.9, 20.0, 1.0, 1 - 1e-15)
    assert rep.assembled_bound == pytest.approx(0.0, abs=1e-12)

    def bound(**kw):
        base = dict(epsilon_r=1.0, epsilon_c=[1.0], delta=0.02, gamma=0.9,
                    eta=20.0, alpha=1.0, h=0.5)
        base.update(kw)
        return orc.assemble_bound(**base).assembled_bound

    for grid, key, increasing in (
            ([0.01, 0.02, 0.1, 0.5], "delta", True),
            ([1.0, 5.0, 20.0, 80.0], "eta", True),
            ([0.6, 1.0, 2.0], "alpha", True),
            ([0.1, 0.3, 0.5], "h", False)):
        vals = [bound(**{key: g}) for g in grid]
        diffs = np.diff(vals)
        assert np.all(diffs > 0) if increasing else np.all(diffs < 0), key


def test_assemble_bound_parameter_errors():
    with pytest.raises(ParameterError):
        orc.assemble_bound(1.0, [1.0], -0.1, 0.9, 20.0, 1.0, 0.5)
    with pytest.raises(ParameterError):
        orc.assemble_bound(1.0, [1.0], 0.1, 0.9, 20.0, 0.3, 0.5)  # h >= alpha
    with pytest.raises(ParameterError):
        orc.assemble_bound(1.0, [1.0], 0.1, 1.0, 20.0, 1.0, 0.5)


def test_bound_holds_on_exact_runs():
    for seed in (37, 41, 43):
        cmdp, d = orc.random_binding_cmdp(seed, n_states=5, n_actions=3)
        sol = orc.solve_dual(cmdp, d)
        eta = 2.0 * sol.lambda_star[0]
        pi_k, _, _ = orc.exact_surrogate_optimize(
            cmdp, d, eta, alpha=0.02, h=0.01,
            starts=orc.default_starts(cmdp, sol))
        rep = orc.bound_report_for_run(cmdp, d, eta, 0.02, 0.01,
                                       sol.policy_star, pi_k)
        assert rep.holds
        assert rep.assembled_bound >= 0.0
        assert rep.observed_gap >= 0.0
        assert rep.delta >= 0.0


# -- instance generator ------------------------------------------------------------------


def test_random_binding_cmdp_is_binding_and_deterministic():
    cmdp1, d1 = orc.random_binding_cmdp(0, n_states=5, n_actions=3)
    cmdp2, d2 = orc.random_binding_cmdp(0, n_states=5, n_actions=3)
    assert d1 == d2
    assert np.array_equal(cmdp1.transition, cmdp2.transition)
    # budget sits strictly inside the achievable cost range
    _, greedy = orc.value_iteration(cmdp1, cmdp1.reward)
    ev = orc.policy_evaluation(
        cmdp1, orc.deterministic_policy_matrix(greedy, 3))
    assert d1 < ev.j_c[0]
    sol = orc.solve_dual(cmdp1, d1)
    assert sol.feasible and sol.lambda_star[0] > 0
