"""Acceptance gate: every release criterion at its stated tolerance.

Each test prints one line, ``ACCEPTANCE <id> <name>: PASS`` (or FAIL on
assertion), and checks its own runtime cap.  Run with

    pytest tests/test_acceptance.py -v -s

Criterion 6 trains 12 full point-mass runs and takes ~10 minutes on one
core; everything else finishes in seconds.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from cmdplab import cli
from cmdplab import diffcore as dc
from cmdplab import oracle as orc
from cmdplab import trainer as tr
from cmdplab.envs import PondWorld, PondWorldConfig, PointMass, \
    PointMassConfig
from cmdplab.penalty import PenaltyConfig, PenaltyKind, penalty_grad, \
    penalty_value, stagnation_threshold
from cmdplab.rollout import gae

from test_diffcore import _random_loss, finite_diff, rel_err
from test_oracle import WORKED_BOUND, brute_constrained
from test_rollout import gae_double_sum


@contextmanager
def criterion(cid: str, name: str, runtime_cap: float):
    start = time.time()
    try:
        yield
    except Exception:
        print(f"ACCEPTANCE {cid} {name}: FAIL", flush=True)
        raise
    elapsed = time.time() - start
    assert elapsed < runtime_cap, \
        f"criterion {cid} took {elapsed:.1f}s (cap {runtime_cap}s)"
    print(f"ACCEPTANCE {cid} {name}: PASS ({elapsed:.1f}s)", flush=True)


# -- shared instance family for criteria 4 and 5 -------------------------------

_SIZES = [(3, 2), (4, 2), (4, 3), (5, 3), (6, 3), (6, 2)]
_ALPHA = 0.02
_H = 0.01


@pytest.fixture(scope="module")
def theorem_instances():
    """20 random binding-constraint CMDPs (<= 6 states, <= 3 actions, with
    a moderate shadow price) plus the canonical 5x5 pond gridworld."""
    instances = []
    seed = 0
    while len(instances) < 20:
        assert seed < 300, "instance scan exhausted"
        n_states, n_actions = _SIZES[seed % len(_SIZES)]
        cmdp, d = orc.random_binding_cmdp(seed, n_states=n_states,
                                          n_actions=n_actions, gamma=0.9)
        sol = orc.solve_dual(cmdp, d)
        if sol.feasible and 0.01 < sol.lambda_star[0] <= 1.0:
            instances.append((f"random-{seed}", cmdp, d, sol))
        seed += 1

    pond = PondWorld(PondWorldConfig(water_cost=25.0)).as_tabular(0.9)
    d_pond = 1.2
    sol_pond = orc.solve_dual(pond, d_pond)
    assert sol_pond.feasible and sol_pond.lambda_star[0] > 0
    instances.append(("pondworld-5x5", pond, d_pond, sol_pond))
    return instances


@pytest.fixture(scope="module")
def clamped_runs(theorem_instances):
    """The criterion-4 instances re-optimized with the clamped variant."""
    runs = []
    for name, cmdp, d, sol in theorem_instances:
        eta = 2.0 * float(sol.lambda_star[0])
        pi_k, _, converged = orc.exact_surrogate_optimize(
            cmdp, d, eta, _ALPHA, _H, starts=orc.default_starts(cmdp, sol))
        runs.append((name, cmdp, d, sol, eta, pi_k, converged))
    return runs


# -- criteria -------------------------------------------------------------------


def test_criterion_1_penalty_suite():
    with criterion("1", "penalty-function suite", 1.0):
        for alpha in (0.1, 0.5, 1.0, 2.0):
            cfg = PenaltyConfig(alpha=alpha)
            # C1 continuity: gradient gap at the origin below 1e-8
            left = penalty_grad(PenaltyKind.CELU, -1e-300, cfg)
            right = penalty_grad(PenaltyKind.CELU, 0.0, cfg)
            assert abs(right - left) < 1e-8
            # ELU gradient jump is |1 - alpha| exactly
            jump = abs(penalty_grad(PenaltyKind.ELU, 0.0, cfg)
                       - penalty_grad(PenaltyKind.ELU, -1e-300, cfg))
            assert jump == abs(1.0 - alpha)
            # CELU is bounded below by -alpha everywhere
            xs = np.concatenate([np.linspace(-1e6, 0, 100001),
                                 np.linspace(0, 50, 1001)])
            assert np.all(penalty_value(PenaltyKind.CELU, xs, cfg)
                          >= -alpha)
        thr = stagnation_threshold(PenaltyConfig(alpha=1.0, h=0.5))
        assert abs(thr - np.log(0.5)) < 1e-12


def test_criterion_2_autodiff_gradient_check():
    with criterion("2", "autodiff gradient check", 30.0):
        checked = 0
        seed = 0
        kinds_seen = set()
        while checked < 100:
            seed += 1
            mlp, build = _random_loss(seed)
            flat0 = dc.flatten_nodes(mlp.nodes())
            loss, near_kink = build(flat0)
            if near_kink:
                continue

            def f(flat):
                node, _ = build(flat)
                return float(node.value)

            loss, _ = build(flat0)
            gmap = dc.backward(loss, mlp.nodes())
            analytic = np.concatenate(
                [gmap[id(p)].ravel() for p in mlp.nodes()])
            numeric = finite_diff(f, flat0, step=1e-5)
            assert rel_err(analytic, numeric, floor=1e-7) < 1e-4, seed
            kinds_seen |= {node_kind for node_kind in _ops_used(loss)}
            checked += 1
        # the composition pool exercised every kinked trainer primitive
        assert {"celu", "clip", "maximum", "minimum", "tanh",
                "exp"} <= kinds_seen


def _ops_used(loss):
    seen = set()
    stack = [loss]
    visited = set()
    while stack:
        node = stack.pop()
        if id(node) in visited:
            continue
        visited.add(id(node))
        seen.add(node.op)
        stack.extend(node.parents)
    return seen


def test_criterion_3_gae_oracle_equivalence():
    with criterion("3", "GAE oracle equivalence", 10.0):
        rng = np.random.default_rng(20240501)
        for _ in range(1000):
            T = int(rng.integers(1, 65))
            rewards = rng.standard_normal(T) * rng.uniform(0.5, 4.0)
            values = rng.standard_normal(T)
            flags = rng.random(T) < 0.2
            gamma = rng.uniform(0.0, 1.0)
            lam = rng.uniform(0.0, 1.0)
            last = float(rng.standard_normal())
            fast = gae(rewards, values, flags, gamma, lam, last)
            slow = gae_double_sum(rewards, values, flags, gamma, lam, last)
            assert np.max(np.abs(fast - slow)) < 1e-10


def test_criterion_4_theorem1_desk_scale(theorem_instances):
    with criterion("4", "theorem 1 at desk scale", 300.0):
        assert len(theorem_instances) == 21
        for name, cmdp, d, sol in theorem_instances:
            eta = 2.0 * float(sol.lambda_star[0])
            pi, _, converged = orc.exact_surrogate_optimize(
                cmdp, d, eta, _ALPHA,
                starts=orc.default_starts(cmdp, sol))
            ev = orc.policy_evaluation(cmdp, pi)
            assert converged, name
            assert ev.j_r >= 0.98 * sol.j_r_star, \
                f"{name}: J_R {ev.j_r:.6f} < 0.98 * {sol.j_r_star:.6f}"
            assert ev.j_c[0] <= d + 1e-3, \
                f"{name}: J_C {ev.j_c[0]:.6f} > {d:.6f} + 1e-3"

        # independent oracle: enumeration + refined lambda grid on all
        # instances with at most 4 states
        small = [(n, c, d, s) for n, c, d, s in theorem_instances
                 if c.n_states <= 4 and n.startswith("random")]
        assert small, "family must contain small instances"
        for name, cmdp, d, sol in small:
            bf = brute_constrained(cmdp, d)
            assert bf is not None
            assert abs(sol.j_r_star - bf["j_r"]) < 1e-6, name
            assert abs(sol.j_c_star[0] - bf["j_c"]) < 1e-6, name
            assert abs(sol.lambda_star[0] - bf["lam"]) < 1e-6, name


def test_criterion_5_theorem2_bound(clamped_runs):
    with criterion("5", "theorem 2 bound", 60.0):
        # the worked example, recomputed independently before coding:
        # sqrt(2*0.02)*0.9/0.1 = 1.8; bound = 1.8 + 20*(1.8 + |ln 0.5|)
        rep = orc.assemble_bound(epsilon_r=1.0, epsilon_c=[1.0],
                                 delta=0.02, gamma=0.9, eta=20.0,
                                 alpha=1.0, h=0.5)
        assert abs(rep.assembled_bound - WORKED_BOUND) < 1e-9

        violations = []
        for name, cmdp, d, sol, eta, pi_k, converged in clamped_runs:
            rep = orc.bound_report_for_run(cmdp, d, eta, _ALPHA, _H,
                                           sol.policy_star, pi_k)
            assert rep.assembled_bound >= 0.0
            if not rep.holds:
                violations.append((name, rep.observed_gap,
                                   rep.assembled_bound))
        assert not violations, violations


POINTMASS_ENV = dict(horizon=100)
POINTMASS_TRAINER = dict(
    cost_limits=(5.0,), epochs=100, steps_per_epoch=2000, gamma=0.9,
    kl_hi=0.01, policy_lr=5e-5)
SEEDS = (0, 1, 2)


def _final_window_stats(history):
    w = max(1, len(history) // 10)
    tail = history[-w:]
    return (float(np.mean([r["cost"][0] for r in tail])),
            float(np.mean([r["violation_rate"] for r in tail])))


def _run_pointmass(algo: str, alpha: float, seed: int):
    env = PointMass(PointMassConfig(**POINTMASS_ENV))
    cfg = tr.TrainerConfig(algo=algo, alpha=alpha, seed=seed,
                           **POINTMASS_TRAINER)
    return tr.train(cfg, env)


@pytest.mark.slow
def test_criterion_6_training_behavior():
    with criterion("6", "training behavior (directional)", 1200.0):
        d = POINTMASS_TRAINER["cost_limits"][0]
        viol_by_alpha = {}
        ip3o_cost = None
        for alpha in (0.1, 0.5, 1.0):
            costs, viols = [], []
            for seed in SEEDS:
                hist = _run_pointmass("IP3O", alpha, seed)
                c, v = _final_window_stats(hist)
                costs.append(c)
                viols.append(v)
            viol_by_alpha[alpha] = float(np.mean(viols))
            print(f"  IP3O alpha={alpha}: costs={np.round(costs, 2)} "
                  f"violation={viol_by_alpha[alpha]:.3f}", flush=True)
            if alpha == 0.5:
                ip3o_cost = float(np.mean(costs))

        ppo_costs = []
        for seed in SEEDS:
            hist = _run_pointmass("PPO", 0.5, seed)
            c, _ = _final_window_stats(hist)
            ppo_costs.append(c)
        ppo_cost = float(np.mean(ppo_costs))
        print(f"  PPO: costs={np.round(ppo_costs, 2)}", flush=True)

        # compliance: IP3O within 1.1*d, vanilla PPO over d by >= 50%
        assert ip3o_cost <= 1.1 * d, ip3o_cost
        assert ppo_cost >= 1.5 * d, ppo_cost
        # the safety knob is directional: violation rate non-increasing
        # as the stagnation depth grows
        assert viol_by_alpha[0.1] >= viol_by_alpha[0.5] >= \
            viol_by_alpha[1.0], viol_by_alpha


def _pond_cli_config(out_dir, algo):
    return {
        "trainer": {"algo": algo, "cost_limits": [], "epochs": 10,
                    "steps_per_epoch": 5000, "update_epochs": 10,
                    "seed": 0},
        "env": {"kind": "pondworld"},
        "out_dir": str(out_dir),
        "checkpoint_interval": 100,
    }


@pytest.mark.slow
def test_criterion_7_and_8_reduction_and_determinism(tmp_path):
    with criterion("7", "reduction identity (IP3O m=0 == PPO)", 60.0):
        payloads = {}
        for algo in ("IP3O", "PPO"):
            out = tmp_path / algo.lower()
            cfg_path = tmp_path / f"{algo.lower()}.json"
            cfg_path.write_text(json.dumps(_pond_cli_config(out, algo)))
            assert cli.main(["train", "--config", str(cfg_path)]) == 0
            payloads[algo] = (out / "metrics.csv").read_bytes()
        assert payloads["IP3O"] == payloads["PPO"]

    with criterion("8", "byte-identical reruns", 60.0):
        out = tmp_path / "rerun"
        cfg_path = tmp_path / "rerun.json"
        cfg_path.write_text(json.dumps(_pond_cli_config(out, "IP3O")))
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        first = (out / "metrics.csv").read_bytes()
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        assert (out / "metrics.csv").read_bytes() == first
        assert first == payloads["IP3O"]
