"""Experiment runner: seeded train / evaluate / oracle-check / sweep.

Configs are strict JSON: unknown keys are rejected with the offending
field path.  Every run writes ``metrics.csv`` (one row per epoch, fixed
schema), ``summary.json`` (means over the final 10% of epochs),
checkpoints in the flat-vector format, and static SVG curves with a
dashed line at the cost limit.  Exit codes: 0 success, 1 validation
error, 2 runtime failure, 3 oracle-check failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import math
import multiprocessing
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import oracle as orc
from . import trainer as tr
from .envs import PondWorldConfig, PointMassConfig, make_env
from .errors import CheckpointError, CmdpLabError, ConfigError, ParameterError

_ENV_CLASSES = {"pondworld": PondWorldConfig, "pointmass": PointMassConfig}


@dataclass
class SweepConfig:
    axes: list          # [[field path, [values...]], ...]
    seeds: list
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.axes, list) or not self.axes:
            raise ParameterError("sweep.axes must be a non-empty list")
        for ax in self.axes:
            if (not isinstance(ax, (list, tuple)) or len(ax) != 2
                    or not isinstance(ax[0], str)
                    or not isinstance(ax[1], list) or not ax[1]):
                raise ParameterError(
                    "each sweep axis must be [field-path, [values...]]")
        if not isinstance(self.seeds, list) or not self.seeds:
            raise ParameterError("sweep.seeds must be a non-empty list")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ParameterError("sweep.workers must be a positive integer")


@dataclass
class OracleCheckConfig:
    eta_scales: list = dataclasses.field(
        default_factory=lambda: [0.5, 1.0, 2.0, 10.0])
    alpha: float = 0.02
    h: float = 0.01
    strict_infeasible: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError("oracle.alpha must be > 0")
        if not 0 < self.h < self.alpha:
            raise ParameterError("oracle.h must lie in (0, alpha)")
        if not self.eta_scales:
            raise ParameterError("oracle.eta_scales must be non-empty")


@dataclass
class ExperimentConfig:
    trainer: tr.TrainerConfig
    env: dict
    out_dir: str = "runs/exp"
    checkpoint_interval: int = 100
    eval_episodes: int = 10
    sweep: SweepConfig | None = None
    oracle: OracleCheckConfig | None = None

    def __post_init__(self):
        if self.checkpoint_interval < 1:
            raise ParameterError("checkpoint_interval must be >= 1")
        if self.eval_episodes < 1:
            raise ParameterError("eval_episodes must be >= 1")


# -- strict config parsing ---------------------------------------------------


def _parse_dataclass(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}", path)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", path)
    kwargs = {k: v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ParameterError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from exc


def _validate_env_spec(data, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError("env must be an object", path)
    kind = data.get("kind")
    if kind not in _ENV_CLASSES:
        raise ConfigError(f"env.kind must be one of "
                          f"{sorted(_ENV_CLASSES)}, got {kind!r}", path)
    names = {f.name for f in dataclasses.fields(_ENV_CLASSES[kind])}
    unknown = sorted(set(data) - names - {"kind"})
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", path)
    try:
        make_env(data)
    except (ParameterError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from exc
    return dict(data)


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a raw config dict into an ExperimentConfig (strict keys)."""
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be an object")
    allowed = {"trainer", "env", "out_dir", "checkpoint_interval",
               "eval_episodes", "sweep", "oracle"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}")
    if "trainer" not in data or "env" not in data:
        raise ConfigError("config requires 'trainer' and 'env' sections")

    trainer_cfg = _parse_dataclass(tr.TrainerConfig, data["trainer"],
                                   "trainer")
    env_spec = _validate_env_spec(data["env"], "env")
    sweep = (_parse_dataclass(SweepConfig, data["sweep"], "sweep")
             if data.get("sweep") is not None else None)
    oracle_cfg = (_parse_dataclass(OracleCheckConfig, data["oracle"],
                                   "oracle")
                  if data.get("oracle") is not None else None)
    kwargs = {}
    for key in ("out_dir", "checkpoint_interval", "eval_episodes"):
        if key in data:
            kwargs[key] = data[key]
    try:
        return ExperimentConfig(trainer=trainer_cfg, env=env_spec,
                                sweep=sweep, oracle=oracle_cfg, **kwargs)
    except (ParameterError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column "
                          f"{exc.colno}: {exc.msg}")
    return parse_config(data)


def serialize_config(cfg: ExperimentConfig) -> dict:
    """Inverse of parse_config up to semantic identity."""

    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {k: plain(v)
                    for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, (tuple, list)):
            return [plain(v) for v in obj]
        if isinstance(obj, frozenset):
            return sorted(plain(v) for v in obj)
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    out = {
        "trainer": plain(cfg.trainer),
        "env": plain(cfg.env),
        "out_dir": cfg.out_dir,
        "checkpoint_interval": cfg.checkpoint_interval,
        "eval_episodes": cfg.eval_episodes,
    }
    if cfg.sweep is not None:
        out["sweep"] = plain(cfg.sweep)
    if cfg.oracle is not None:
        out["oracle"] = plain(cfg.oracle)
    return out


def set_by_path(raw: dict, path: str, value) -> None:
    """Assign into a nested dict along a dotted field path."""
    parts = path.split(".")
    node = raw
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


# -- metrics persistence -------------------------------------------------------


def metrics_header(m: int) -> list[str]:
    return (["epoch", "steps", "return"]
            + [f"cost_{i}" for i in range(m)]
            + ["violation_rate", "loss_r"]
            + [f"loss_c_{i}" for i in range(m)]
            + ["loss_total", "kl"])


def metrics_row_values(row: dict) -> list:
    return ([row["epoch"], row["steps"], row["return"]]
            + list(row["cost"])
            + [row["violation_rate"], row["loss_r"]]
            + list(row["loss_c"])
            + [row["loss_total"], row["kl"]])


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def read_metrics(path) -> list[dict]:
    """Parse metrics.csv back into row dicts (the MetricsRow schema)."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for rec in reader:
            cost_keys = sorted(k for k in rec if k.startswith("cost_"))
            loss_keys = sorted(k for k in rec if k.startswith("loss_c_"))
            rows.append({
                "epoch": int(rec["epoch"]),
                "steps": int(rec["steps"]),
                "return": float(rec["return"]),
                "cost": [float(rec[k]) for k in cost_keys],
                "violation_rate": float(rec["violation_rate"]),
                "loss_r": float(rec["loss_r"]),
                "loss_c": [float(rec[k]) for k in loss_keys],
                "loss_total": float(rec["loss_total"]),
                "kl": float(rec["kl"]),
            })
    return rows


def write_summary(path, rows: list[dict], m: int) -> None:
    """Means over the final 10% of epochs (at least one)."""
    if rows:
        w = max(1, math.ceil(0.1 * len(rows)))
        tail = rows[-w:]
        summary = {
            "epochs": len(rows),
            "window_epochs": w,
            "mean_return": float(np.mean([r["return"] for r in tail])),
            "mean_cost": [float(np.mean([r["cost"][i] for r in tail]))
                          for i in range(m)],
            "mean_violation_rate": float(np.mean(
                [r["violation_rate"] for r in tail])),
        }
    else:
        summary = {"epochs": 0, "window_epochs": 0, "mean_return": None,
                   "mean_cost": [None] * m, "mean_violation_rate": None}
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))


def write_curves(metrics_path, out_dir, cost_limits) -> None:
    """Emit reward/cost curves as SVG from metrics.csv alone (pure
    presentation; safe to delete and regenerate)."""
    rows = read_metrics(metrics_path)
    if not rows:
        return
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cmdplab"
    import matplotlib.pyplot as plt

    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r["return"] for r in rows], lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean episode return")
    fig.tight_layout()
    fig.savefig(Path(out_dir) / "reward_curve.svg", metadata={"Date": None})
    plt.close(fig)

    if cost_limits:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for i, d in enumerate(cost_limits):
            ax.plot(epochs, [r["cost"][i] for r in rows], lw=1.5,
                    label=f"cost {i}")
            ax.axhline(d, ls="--", color="k", lw=1.0)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean episodic cost")
        if len(cost_limits) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(Path(out_dir) / "cost_curve.svg",
                    metadata={"Date": None})
        plt.close(fig)


# -- commands ------------------------------------------------------------------


def _save_checkpoints(out_dir: Path, trainer: tr.Trainer, epoch: int) -> None:
    ck = out_dir / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    tag = f"epoch_{epoch:06d}"
    tr.save_policy(ck / f"{tag}_policy.bin", trainer.policy)
    tr.save_critic(ck / f"{tag}_value_r.bin", trainer.v_critic)
    for i, c in enumerate(trainer.c_critics):
        tr.save_critic(ck / f"{tag}_value_c{i}.bin", c)


def run_train_config(cfg: ExperimentConfig, quiet: bool = False) -> dict:
    """Execute one training run; returns the summary dict."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg.env)
    trainer = tr.Trainer(cfg.trainer, env)
    m = cfg.trainer.n_constraints

    metrics_path = out_dir / "metrics.csv"
    _save_checkpoints(out_dir, trainer, 0)
    with open(metrics_path, "w") as f:
        f.write(",".join(metrics_header(m)) + "\n")
        f.flush()

        def on_epoch(k, row, t):
            f.write(",".join(_fmt(v) for v in metrics_row_values(row))
                    + "\n")
            f.flush()
            if (k + 1) % cfg.checkpoint_interval == 0:
                _save_checkpoints(out_dir, t, k + 1)
            if not quiet and (k + 1) % max(1, cfg.trainer.epochs // 10) == 0:
                cost = (f" cost={row['cost'][0]:.3f}" if m else "")
                print(f"[{cfg.trainer.algo}] epoch {k + 1}/"
                      f"{cfg.trainer.epochs} return={row['return']:.3f}"
                      f"{cost} kl={row['kl']:.4f}", flush=True)

        try:
            trainer.train(on_epoch)
        finally:
            # partial outputs stay on disk even when an epoch fails
            write_summary(out_dir / "summary.json", trainer.history, m)

    if cfg.trainer.epochs > 0:
        _save_checkpoints(out_dir, trainer, cfg.trainer.epochs)
    write_curves(metrics_path, out_dir, cfg.trainer.cost_limits)
    return json.loads((out_dir / "summary.json").read_text())


def cmd_train(cfg: ExperimentConfig) -> int:
    run_train_config(cfg)
    return 0


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str,
                 episodes: int | None) -> int:
    env = make_env(cfg.env)
    policy = tr.load_policy(checkpoint)
    if policy.mlp.layer_sizes[0] != env.obs_dim:
        raise CheckpointError(
            f"checkpoint expects obs_dim "
            f"{policy.mlp.layer_sizes[0]}, env provides {env.obs_dim}")
    want_discrete = env.n_actions is not None
    is_discrete = isinstance(policy, tr.CategoricalPolicy)
    if want_discrete != is_discrete:
        raise CheckpointError("checkpoint action head does not match the "
                              "environment action space")
    if want_discrete and policy.n_actions != env.n_actions:
        raise CheckpointError(f"checkpoint has {policy.n_actions} actions, "
                              f"env has {env.n_actions}")
    if not want_discrete and policy.act_dim != env.action_dim:
        raise CheckpointError("checkpoint action dimension mismatch")

    n = episodes if episodes is not None else cfg.eval_episodes
    result = tr.evaluate_policy(policy, env, n, cfg.trainer.seed,
                                cfg.trainer.cost_limits)
    result["checkpoint"] = str(checkpoint)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.json").write_text(json.dumps(result, indent=2,
                                                  sort_keys=True))
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_oracle_check(cfg: ExperimentConfig) -> int:
    ocfg = cfg.oracle or OracleCheckConfig()
    env = make_env(cfg.env)
    cmdp = env.as_tabular(cfg.trainer.gamma)  # raises on non-tabular envs
    if cfg.trainer.n_constraints < 1:
        raise ConfigError("oracle-check needs at least one cost limit",
                          "trainer.cost_limits")
    d = cfg.trainer.cost_limits[0]
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    sol = orc.solve_dual(cmdp, d)
    if not sol.feasible:
        report = {"applicable": False, "reason": "no policy satisfies the "
                  f"budget d={d}", "passed": None}
        (out_dir / "oracle_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True))
        print("oracle-check: not applicable (infeasible budget)")
        return 3 if ocfg.strict_infeasible else 0

    lam = float(sol.lambda_star[0])
    grid = ([s * lam for s in ocfg.eta_scales] if lam > 0
            else [0.0, 1.0, 10.0])
    t1 = orc.verify_theorem1(cmdp, d, grid, alpha=ocfg.alpha, h=None)

    eta_bound = 2.0 * lam if lam > 0 else 1.0
    pi_k, _, converged = orc.exact_surrogate_optimize(
        cmdp, d, eta_bound, ocfg.alpha, ocfg.h,
        starts=orc.default_starts(cmdp, sol))
    bound = orc.bound_report_for_run(cmdp, d, eta_bound, ocfg.alpha,
                                     ocfg.h, sol.policy_star, pi_k)
    report = {
        "theorem1": t1,
        "bound": {
            "eta": eta_bound,
            "alpha": ocfg.alpha,
            "h": ocfg.h,
            "converged": bool(converged),
            "epsilon_r": bound.epsilon_r,
            "epsilon_c": [float(x) for x in bound.epsilon_c],
            "delta": bound.delta,
            "assembled_bound": bound.assembled_bound,
            "observed_gap": bound.observed_gap,
            "holds": bound.holds,
        },
        "passed": bool(t1["passed"] and bound.holds),
    }
    (out_dir / "oracle_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True))
    print(f"oracle-check: lambda*={lam:.6f} J_R*={t1['j_r_star']:.6f} "
          f"passed={report['passed']}")
    return 0 if report["passed"] else 3


def _sweep_worker(raw: dict):
    try:
        cfg = parse_config(raw)
        summary = run_train_config(cfg, quiet=True)
        return {"out_dir": cfg.out_dir, "status": "ok", "summary": summary}
    except Exception as exc:  # recorded; the sweep itself continues
        return {"out_dir": raw.get("out_dir", "?"), "status": "error",
                "error": f"{type(exc).__name__}: {exc}"}


def cmd_sweep(cfg: ExperimentConfig, raw: dict) -> int:
    if cfg.sweep is None:
        raise ConfigError("config has no 'sweep' section", "sweep")
    sweep = cfg.sweep
    base_out = Path(cfg.out_dir)
    base_out.mkdir(parents=True, exist_ok=True)

    jobs = []
    combos = [[]]
    for axis_path, values in sweep.axes:
        combos = [c + [(axis_path, v)] for c in combos for v in values]
    for combo in combos:
        for seed in sweep.seeds:
            sub = copy.deepcopy(raw)
            sub.pop("sweep", None)
            name = ",".join(f"{p.split('.')[-1]}={v}" for p, v in combo)
            name = f"{name},seed={seed}" if name else f"seed={seed}"
            for p, v in combo:
                set_by_path(sub, p, v)
            set_by_path(sub, "trainer.seed", seed)
            sub["out_dir"] = str(base_out / name.replace("/", "_"))
            parse_config(sub)  # validate before launching
            jobs.append((name, combo, seed, sub))

    if sweep.workers > 1:
        with multiprocessing.Pool(sweep.workers) as pool:
            results = pool.map(_sweep_worker, [j[3] for j in jobs])
    else:
        results = [_sweep_worker(j[3]) for j in jobs]

    m = cfg.trainer.n_constraints
    axis_names = [p for p, _ in sweep.axes]
    header = (["run"] + axis_names + ["seed", "status", "mean_return"]
              + [f"mean_cost_{i}" for i in range(m)]
              + ["mean_violation_rate"])
    failures = 0
    with open(base_out / "sweep_summary.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for (name, combo, seed, _), res in zip(jobs, results):
            vals = [name] + [_fmt(v) if isinstance(v, (int, float))
                             else json.dumps(v) for _, v in combo] \
                + [str(seed), res["status"]]
            if res["status"] == "ok":
                s = res["summary"]
                vals += [_fmt(s["mean_return"])]
                vals += [_fmt(c) for c in s["mean_cost"]]
                vals += [_fmt(s["mean_violation_rate"])]
            else:
                failures += 1
                vals += [""] * (2 + m)
                print(f"sweep run {name} failed: {res['error']}",
                      file=sys.stderr)
            writer.writerow(vals)
    print(f"sweep: {len(jobs) - failures}/{len(jobs)} runs succeeded")
    return 0 if failures == 0 else 2


# -- entry point ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmdplab",
        description="Constrained-RL laboratory: penalized proximal policy "
                    "optimization with exact tabular oracles.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "evaluate", "oracle-check", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override trainer.seed")
        p.add_argument("--out", default=None, help="override out_dir")
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True,
                           help="policy checkpoint (.bin)")
            p.add_argument("--episodes", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("top-level config must be an object")
        if args.seed is not None:
            set_by_path(raw, "trainer.seed", args.seed)
        if args.out is not None:
            raw["out_dir"] = args.out
        cfg = parse_config(raw)

        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, args.episodes)
        if args.command == "oracle-check":
            return cmd_oracle_check(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, raw)
        raise ConfigError(f"unknown command {args.command!r}")
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON at line {exc.lineno}, column "
              f"{exc.colno}: {exc.msg}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except CmdpLabError as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
