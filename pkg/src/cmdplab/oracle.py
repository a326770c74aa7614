"""Exact tabular CMDP solving and theorem-level verification.

Everything here works on explicit ``TabularCMDP`` instances with exact
linear algebra (no sampling):

* ``policy_evaluation`` — exact values, advantages, returns, and the
  normalized discounted occupancy of a stochastic policy.
* ``value_iteration`` — optimal values for an arbitrary per-(s, a) signal,
  with a deterministic greedy policy (lowest action index wins ties).
* ``solve_dual`` — the constrained optimum for a single-constraint budget
  via bisection on the scalarized signal r - lambda*c; at a binding
  boundary the two adjacent deterministic optima are mixed at the
  occupancy level so the solution meets the budget exactly.
* ``exact_surrogate_optimize`` — full-gradient minimization of the exact
  penalized objective -(1-gamma)*J_R + eta * sum_i CELU(J_Ci - d_i)
  over softmax tabular policies; this is the sampled trainer's loss with
  expectations taken exactly at the current iterate, so its fixed points
  are the penalized-recursion fixed points.
* ``verify_theorem1`` / ``assemble_bound`` — executable forms of the two
  guarantees: penalized optimization with a large-enough penalty factor
  recovers the constrained optimum, and the optimization error of the
  clamped variant stays under the closed-form bound
  sqrt(2*delta)*gamma*eps_R/(1-gamma)
  + eta * sum_i [sqrt(2*delta)*gamma*eps_Ci/(1-gamma) + |alpha*log(h)|].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize as sciopt

from .envs import TabularCMDP
from .errors import ParameterError
from .penalty import PenaltyConfig, PenaltyKind, penalty_grad, penalty_value


@dataclass
class Evaluation:
    """Exact quantities of one policy on one CMDP."""

    v_r: np.ndarray        # (S,)
    q_r: np.ndarray        # (S, A)
    adv_r: np.ndarray      # (S, A)
    v_c: np.ndarray        # (m, S)
    q_c: np.ndarray        # (m, S, A)
    adv_c: np.ndarray      # (m, S, A)
    j_r: float
    j_c: np.ndarray        # (m,)
    occupancy: np.ndarray  # (S,), normalized discounted state visitation


@dataclass
class OracleSolution:
    """Constrained optimum of a TabularCMDP for budget d."""

    feasible: bool
    j_r_star: float
    j_c_star: np.ndarray
    lambda_star: np.ndarray
    policy_star: np.ndarray  # (S, A) state-wise action distribution


@dataclass
class BoundReport:
    """Assembled worst-case error bound and, when paired with a run, the
    exactly measured objective gap."""

    epsilon_r: float
    epsilon_c: np.ndarray
    delta: float
    assembled_bound: float
    observed_gap: float | None = None
    holds: bool | None = None


# -- exact policy evaluation -------------------------------------------------


def policy_evaluation(cmdp: TabularCMDP, pi: np.ndarray) -> Evaluation:
    """Exact values/advantages/occupancy by solving the linear systems."""
    pi = np.asarray(pi, dtype=np.float64)
    S, A = cmdp.n_states, cmdp.n_actions
    if pi.shape != (S, A):
        raise ParameterError(f"policy shape {pi.shape}, expected {(S, A)}")
    g = cmdp.gamma
    p_pi = np.einsum("sa,sat->st", pi, cmdp.transition)
    lhs = np.eye(S) - g * p_pi

    def values(signal):
        r_pi = (pi * signal).sum(axis=1)
        v = np.linalg.solve(lhs, r_pi)
        q = signal + g * cmdp.transition @ v
        return v, q

    v_r, q_r = values(cmdp.reward)
    m = cmdp.n_constraints
    v_c = np.empty((m, S))
    q_c = np.empty((m, S, A))
    for i in range(m):
        v_c[i], q_c[i] = values(cmdp.cost[i])

    occ = (1.0 - g) * np.linalg.solve(lhs.T, cmdp.rho)
    return Evaluation(
        v_r=v_r, q_r=q_r, adv_r=q_r - v_r[:, None],
        v_c=v_c, q_c=q_c, adv_c=q_c - v_c[:, :, None],
        j_r=float(cmdp.rho @ v_r),
        j_c=v_c @ cmdp.rho,
        occupancy=occ,
    )


def deterministic_policy_matrix(actions: np.ndarray, n_actions: int
                                ) -> np.ndarray:
    pi = np.zeros((len(actions), n_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


# -- value iteration ---------------------------------------------------------


def vi_sweep(cmdp: TabularCMDP, signal: np.ndarray, v: np.ndarray
             ) -> np.ndarray:
    """One Bellman-optimality sweep for an arbitrary (S, A) signal."""
    return (signal + cmdp.gamma * cmdp.transition @ v).max(axis=1)


def value_iteration(cmdp: TabularCMDP, signal: np.ndarray,
                    tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Optimal values of the signal-MDP within ``tol`` sup-norm, plus the
    greedy deterministic policy (lowest action index on ties).

    Sweeps until the contraction bound gamma/(1-gamma)*||dV|| certifies a
    tight iterate, then polishes by evaluating the greedy policy exactly.
    """
    signal = np.asarray(signal, dtype=np.float64)
    g = cmdp.gamma
    # greedy-policy suboptimality is bounded by 2*gamma/(1-gamma) times the
    # value error, so aim below tol/that factor before polishing
    sweep_tol = tol * (1.0 - g) / (2.0 * g) * (1.0 - g) / g
    v = np.zeros(cmdp.n_states)
    for _ in range(1_000_000):
        v_next = vi_sweep(cmdp, signal, v)
        gap = np.max(np.abs(v_next - v))
        v = v_next
        if gap <= max(sweep_tol, 1e-300):
            break
    q = signal + g * cmdp.transition @ v
    greedy = np.argmax(q, axis=1)
    # exact value of the greedy policy (coincides with the fixed point)
    pi = deterministic_policy_matrix(greedy, cmdp.n_actions)
    p_pi = np.einsum("sa,sat->st", pi, cmdp.transition)
    r_pi = (pi * signal).sum(axis=1)
    v_exact = np.linalg.solve(np.eye(cmdp.n_states) - g * p_pi, r_pi)
    return v_exact, greedy


# -- constrained optimum via dual bisection -----------------------------------


def _greedy_eval(cmdp: TabularCMDP, lam: float):
    _, greedy = value_iteration(cmdp, cmdp.reward - lam * cmdp.cost[0])
    pi = deterministic_policy_matrix(greedy, cmdp.n_actions)
    return pi, policy_evaluation(cmdp, pi)


def solve_dual(cmdp: TabularCMDP, d: float, tol_lambda: float = 1e-8,
               lambda_cap: float = 1e6, feas_tol: float = 1e-9
               ) -> OracleSolution:
    """Exact single-constraint optimum: max J_R subject to J_C <= d.

    Bisects on lambda >= 0 over the scalar signal r - lambda*c for the
    smallest multiplier whose greedy policy is feasible, then mixes the
    occupancies of the two adjacent deterministic optima so the returned
    (generally stochastic) policy meets the budget exactly.
    """
    if cmdp.n_constraints != 1:
        raise ParameterError("solve_dual handles exactly one constraint")

    # feasibility: can any policy meet the budget at all?
    _, min_cost_greedy = value_iteration(cmdp, -cmdp.cost[0])
    ev_min = policy_evaluation(
        cmdp, deterministic_policy_matrix(min_cost_greedy, cmdp.n_actions))
    if ev_min.j_c[0] > d + feas_tol:
        return OracleSolution(False, np.nan, np.array([np.nan]),
                              np.array([np.nan]),
                              np.full((cmdp.n_states, cmdp.n_actions),
                                      np.nan))

    pi0, ev0 = _greedy_eval(cmdp, 0.0)
    if ev0.j_c[0] <= d + feas_tol:
        return OracleSolution(True, ev0.j_r, ev0.j_c.copy(),
                              np.array([0.0]), pi0)

    lam_lo, ev_lo, pi_lo = 0.0, ev0, pi0
    lam_hi = 1.0
    while True:
        pi_hi, ev_hi = _greedy_eval(cmdp, lam_hi)
        if ev_hi.j_c[0] <= d + feas_tol:
            break
        lam_lo, ev_lo, pi_lo = lam_hi, ev_hi, pi_hi
        lam_hi *= 2.0
        if lam_hi > lambda_cap:
            raise ParameterError(
                f"could not bracket the multiplier below {lambda_cap}")

    while lam_hi - lam_lo > tol_lambda:
        mid = 0.5 * (lam_lo + lam_hi)
        pi_mid, ev_mid = _greedy_eval(cmdp, mid)
        if ev_mid.j_c[0] <= d + feas_tol:
            lam_hi, ev_hi, pi_hi = mid, ev_mid, pi_mid
        else:
            lam_lo, ev_lo, pi_lo = mid, ev_mid, pi_mid

    lam_star = 0.5 * (lam_lo + lam_hi)
    jc_lo, jc_hi = ev_lo.j_c[0], ev_hi.j_c[0]
    if jc_lo - jc_hi <= 1e-12:
        # no crossing to interpolate; the feasible vertex is the optimum
        return OracleSolution(True, ev_hi.j_r, ev_hi.j_c.copy(),
                              np.array([lam_star]), pi_hi)

    w = (d - jc_hi) / (jc_lo - jc_hi)
    w = float(np.clip(w, 0.0, 1.0))
    mu_lo = ev_lo.occupancy[:, None] * pi_lo
    mu_hi = ev_hi.occupancy[:, None] * pi_hi
    mu = w * mu_lo + (1.0 - w) * mu_hi
    mass = mu.sum(axis=1, keepdims=True)
    pi_star = np.where(mass > 1e-15, mu / np.where(mass > 0, mass, 1.0),
                       pi_hi)
    j_r = w * ev_lo.j_r + (1.0 - w) * ev_hi.j_r
    j_c = w * jc_lo + (1.0 - w) * jc_hi
    return OracleSolution(True, float(j_r), np.array([float(j_c)]),
                          np.array([lam_star]), pi_star)


# -- exact penalized optimization ---------------------------------------------


def _softmax_rows(theta: np.ndarray) -> np.ndarray:
    shifted = theta - theta.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _penalty_cfg(eta: float, alpha: float, h: float | None) -> PenaltyConfig:
    return PenaltyConfig(alpha=alpha, h=h, eta=max(eta, 1e-12))


def penalized_objective(cmdp: TabularCMDP, d, eta: float, alpha: float,
                        h: float | None, pi: np.ndarray,
                        ev: Evaluation | None = None) -> float:
    """Exact penalized objective -(1-gamma)*J_R + eta*sum_i phi(J_Ci - d_i),
    phi = CELU or its clamped variant."""
    ev = ev or policy_evaluation(cmdp, pi)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64),
                        (cmdp.n_constraints,))
    cfg = _penalty_cfg(eta, alpha, h)
    kind = PenaltyKind.CELU_CLAMPED if h is not None else PenaltyKind.CELU
    pen = sum(penalty_value(kind, ev.j_c[i] - d[i], cfg)
              for i in range(cmdp.n_constraints))
    return -(1.0 - cmdp.gamma) * ev.j_r + eta * pen


def exact_surrogate_optimize(cmdp: TabularCMDP, d, eta: float, alpha: float,
                             h: float | None = None, max_iter: int = 20000,
                             grad_tol: float = 1e-8, theta0=None,
                             starts=None):
    """Full-gradient minimization of the exact penalized objective over
    softmax tabular policies.

    The gradient at the current iterate equals the anchored surrogate
    gradient (occupancy and advantages taken at the iterate itself), so
    stationary points are exactly the fixed points of the penalized
    policy-improvement recursion.  Returns (policy, trace, converged)
    where trace rows are (J_R, J_C[0]) per objective evaluation.

    The objective is convex over occupancy measures but the softmax
    parameterization has spurious basins, so ``starts`` may supply extra
    initial logits; the run with the lowest final objective wins.  The
    descent is free to leave any start, so an informed start sharpens
    rather than biases the fixed-point check.
    """
    if starts is not None:
        best = None
        for teta0 in starts:
            pi, trace, conv = exact_surrogate_optimize(
                cmdp, d, eta, alpha, h, max_iter, grad_tol, theta0=teta0)
            value = penalized_objective(cmdp, d, eta, alpha, h, pi)
            if best is None or value < best[0]:
                best = (value, pi, trace, conv)
        return best[1], best[2], best[3]

    S, A = cmdp.n_states, cmdp.n_actions
    m = cmdp.n_constraints
    g = cmdp.gamma
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (m,)).copy()
    cfg = _penalty_cfg(eta, alpha, h)
    kind = PenaltyKind.CELU_CLAMPED if h is not None else PenaltyKind.CELU
    trace: list[tuple[float, float]] = []

    def f_and_grad(theta_flat: np.ndarray):
        pi = _softmax_rows(theta_flat.reshape(S, A))
        ev = policy_evaluation(cmdp, pi)
        gaps = ev.j_c - d
        value = -(1.0 - g) * ev.j_r + eta * sum(
            penalty_value(kind, gaps[i], cfg) for i in range(m))
        coef = -ev.adv_r
        for i in range(m):
            coef = coef + (eta / (1.0 - g)) * penalty_grad(
                kind, gaps[i], cfg) * ev.adv_c[i]
        grad = ev.occupancy[:, None] * pi * coef
        trace.append((ev.j_r, float(ev.j_c[0]) if m else 0.0))
        return float(value), grad.ravel()

    theta = (np.zeros(S * A) if theta0 is None
             else np.asarray(theta0, dtype=np.float64).ravel().copy())
    res = sciopt.minimize(f_and_grad, theta, jac=True, method="L-BFGS-B",
                          options={"maxiter": max_iter, "ftol": 1e-18,
                                   "gtol": grad_tol * 1e-2, "maxcor": 30})
    theta = res.x
    _, grad = f_and_grad(theta)
    g_inf = float(np.max(np.abs(grad))) if grad.size else 0.0

    if g_inf > grad_tol:
        # polish with backtracking gradient descent
        value, grad = f_and_grad(theta)
        for _ in range(5000):
            if np.max(np.abs(grad)) <= grad_tol:
                break
            step = 1.0
            gnorm2 = float(grad @ grad)
            while step > 1e-14:
                cand = theta - step * grad
                v_cand, g_cand = f_and_grad(cand)
                if v_cand <= value - 1e-4 * step * gnorm2:
                    theta, value, grad = cand, v_cand, g_cand
                    break
                step *= 0.5
            else:
                break
        g_inf = float(np.max(np.abs(grad)))

    converged = g_inf <= grad_tol
    return _softmax_rows(theta.reshape(S, A)), trace, converged


# -- theorem-level checks ------------------------------------------------------


def default_starts(cmdp: TabularCMDP, sol: OracleSolution | None = None):
    """Initial logits for the penalized optimizer: the uniform policy and,
    when a dual solution is available, the smoothed constrained optimum."""
    starts = [np.zeros((cmdp.n_states, cmdp.n_actions))]
    if sol is not None and sol.feasible:
        starts.append(np.log(sol.policy_star + 1e-3))
    return starts


def verify_theorem1(cmdp: TabularCMDP, d: float, eta_grid=None,
                    alpha: float = 0.02, h: float | None = None,
                    j_r_frac: float = 0.98, jc_slack: float = 1e-3) -> dict:
    """Run the penalized optimizer across a grid of penalty factors and
    compare against the constrained optimum.

    Rows with eta above the multiplier threshold must recover at least
    ``j_r_frac`` of the optimal return while staying within ``jc_slack``
    of the budget; behavior below the threshold is recorded without
    being asserted.
    """
    sol = solve_dual(cmdp, d)
    if not sol.feasible:
        return {"applicable": False, "reason": "no feasible policy",
                "rows": [], "passed": None}
    lam_star = float(sol.lambda_star[0])
    if eta_grid is None:
        eta_grid = ([0.5 * lam_star, lam_star, 2.0 * lam_star,
                     10.0 * lam_star] if lam_star > 0 else [0.0, 1.0, 10.0])
    starts = default_starts(cmdp, sol)

    rows = []
    for eta in eta_grid:
        pi, _, converged = exact_surrogate_optimize(cmdp, d, float(eta),
                                                    alpha, h, starts=starts)
        ev = policy_evaluation(cmdp, pi)
        required = eta >= lam_star * (1.0 + 1e-6) + 1e-12
        ok = bool(ev.j_r >= j_r_frac * sol.j_r_star
                  and ev.j_c[0] <= d + jc_slack)
        rows.append({
            "eta": float(eta), "j_r": ev.j_r, "j_c": float(ev.j_c[0]),
            "gap_to_oracle": sol.j_r_star - ev.j_r,
            "converged": bool(converged), "required": bool(required),
            "pass": ok,
        })
    passed = all(r["pass"] for r in rows if r["required"])
    return {
        "applicable": True,
        "lambda_star": lam_star,
        "j_r_star": sol.j_r_star,
        "j_c_star": float(sol.j_c_star[0]),
        "d": float(d),
        "alpha": alpha,
        "h": h,
        "rows": rows,
        "passed": passed,
    }


def surrogate_losses(cmdp: TabularCMDP, anchor_pi: np.ndarray,
                     pi: np.ndarray, d) -> tuple[float, np.ndarray]:
    """Anchored surrogate losses, with expectations under the anchor's
    occupancy and advantages: L_R = -E[pi-average A_R] and
    L_Ci = E[pi-average A_Ci]/(1-gamma) + (J_Ci(anchor) - d_i)."""
    ev = policy_evaluation(cmdp, anchor_pi)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64),
                        (cmdp.n_constraints,))
    nu = ev.occupancy
    l_r = -float(np.sum(nu[:, None] * pi * ev.adv_r))
    l_c = np.array([
        float(np.sum(nu[:, None] * pi * ev.adv_c[i])) / (1.0 - cmdp.gamma)
        + float(ev.j_c[i]) - d[i]
        for i in range(cmdp.n_constraints)])
    return l_r, l_c


def anchored_penalized_loss(cmdp: TabularCMDP, anchor_pi: np.ndarray,
                            pi: np.ndarray, d, eta: float, alpha: float,
                            h: float | None = None) -> float:
    """L_R + eta * sum_i phi(L_Ci) with both surrogates anchored at
    ``anchor_pi``; phi is CELU or its clamped variant."""
    l_r, l_c = surrogate_losses(cmdp, anchor_pi, pi, d)
    cfg = _penalty_cfg(eta, alpha, h)
    kind = PenaltyKind.CELU_CLAMPED if h is not None else PenaltyKind.CELU
    return l_r + eta * sum(penalty_value(kind, x, cfg) for x in l_c)


def assemble_bound(epsilon_r: float, epsilon_c, delta: float, gamma: float,
                   eta: float, alpha: float, h: float) -> BoundReport:
    """The closed-form worst-case error bound, assembled verbatim."""
    if delta < 0:
        raise ParameterError(f"delta must be >= 0, got {delta}")
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"gamma must lie in (0, 1), got {gamma}")
    if not 0.0 < h < alpha:
        raise ParameterError(f"need 0 < h < alpha, got h={h} alpha={alpha}")
    epsilon_c = np.atleast_1d(np.asarray(epsilon_c, dtype=np.float64))
    kl_factor = np.sqrt(2.0 * delta) * gamma / (1.0 - gamma)
    clamp_term = abs(alpha * np.log(h))
    bound = kl_factor * epsilon_r + eta * float(
        np.sum(kl_factor * epsilon_c + clamp_term))
    return BoundReport(
        epsilon_r=float(epsilon_r),
        epsilon_c=epsilon_c,
        delta=float(delta),
        assembled_bound=float(bound),
    )


def bound_report_for_run(cmdp: TabularCMDP, d, eta: float, alpha: float,
                         h: float, pi_hat: np.ndarray, pi_k: np.ndarray
                         ) -> BoundReport:
    """Assemble the bound for a finished exact run and pair it with the
    observed gap |L(pi_hat) - L(pi_k)| on the anchored objective.

    The anchor is the final iterate pi_k; delta is the occupancy-weighted
    state-wise KL(pi_hat || pi_k); eps_R / eps_Ci are the largest absolute
    pi_hat-averaged advantages of the anchor.
    """
    ev = policy_evaluation(cmdp, pi_k)
    m = cmdp.n_constraints
    eps_r = float(np.max(np.abs((pi_hat * ev.adv_r).sum(axis=1))))
    eps_c = np.array([
        float(np.max(np.abs((pi_hat * ev.adv_c[i]).sum(axis=1))))
        for i in range(m)])
    ratio = np.where(pi_hat > 0,
                     pi_hat / np.maximum(pi_k, 1e-300), 1.0)
    kl_s = (np.where(pi_hat > 0, pi_hat * np.log(ratio), 0.0)).sum(axis=1)
    delta = float(np.sum(ev.occupancy * kl_s))

    report = assemble_bound(eps_r, eps_c, delta, cmdp.gamma, eta, alpha, h)
    l_hat = anchored_penalized_loss(cmdp, pi_k, pi_hat, d, eta, alpha, h)
    l_k = anchored_penalized_loss(cmdp, pi_k, pi_k, d, eta, alpha, h)
    report.observed_gap = abs(l_hat - l_k)
    report.holds = bool(report.observed_gap
                        <= report.assembled_bound + 1e-9)
    return report


# -- random instances ----------------------------------------------------------


def random_binding_cmdp(seed: int, n_states: int = 5, n_actions: int = 3,
                        gamma: float = 0.9, budget_frac: float = 0.5,
                        max_tries: int = 200) -> tuple[TabularCMDP, float]:
    """Random CMDP whose budget provably binds: d sits strictly between
    the best achievable cost and the unconstrained optimum's cost."""
    rng = np.random.default_rng(np.random.SeedSequence(seed,
                                                       spawn_key=(97,)))
    for _ in range(max_tries):
        P = rng.dirichlet(np.full(n_states, 0.4),
                          size=(n_states, n_actions))
        R = rng.uniform(0.3, 1.0, size=(n_states, n_actions))
        C = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
        rho = rng.dirichlet(np.full(n_states, 1.0))
        cmdp = TabularCMDP(n_states, n_actions, P, R, C, gamma, rho)

        _, greedy_r = value_iteration(cmdp, cmdp.reward)
        ev_r = policy_evaluation(
            cmdp, deterministic_policy_matrix(greedy_r, n_actions))
        _, greedy_minc = value_iteration(cmdp, -cmdp.cost[0])
        ev_minc = policy_evaluation(
            cmdp, deterministic_policy_matrix(greedy_minc, n_actions))
        spread = ev_r.j_c[0] - ev_minc.j_c[0]
        if spread < 0.2:
            continue
        d = float(ev_minc.j_c[0] + budget_frac * spread)
        return cmdp, d
    raise ParameterError(f"no binding instance found in {max_tries} tries "
                         f"for seed {seed}")
