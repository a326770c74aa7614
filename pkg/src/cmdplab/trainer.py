"""Penalized proximal policy optimization and its comparators.

One shared trainer skeleton (collect -> advantages -> critic regression ->
clipped policy updates with a KL window) hosts five algorithms that differ
only in how the per-constraint cost surrogate enters the combined loss:

* ``IP3O``  — eta * CELU(cost surrogate), optionally clamped at -alpha*(1-h);
  an incentive inside the feasible region that decays exponentially with
  slack, turning smoothly into a linear penalty at the boundary.
* ``P3O``   — eta * ReLU(cost surrogate): penalty only after violation.
* ``IPO``   — log barrier -log(-cost surrogate)/t; undefined on violated
  constraints, where a large finite fallback (1e4 * surrogate) is used and
  the step flagged.
* ``PPO_LAGRANGIAN`` — lambda_k * cost surrogate with a projected ascent
  step on lambda_k each epoch.
* ``PPO``   — reward surrogate only.

The ratio clipping follows the asymmetric literal form
r' = min(r, clip(r, 1-eps, 1+eps)) for the reward side and
r'' = max(r, clip(r, 1-eps, 1+eps)) for the cost side (the ratio is
clipped, not the ratio-advantage product; a "standard" product-clipping
mode is available for comparison).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .errors import (CheckpointError, EmptyBatchError, NumericOverflowError,
                     ParameterError)
from .rollout import AdvantageBatch, build_batch, collect

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
RATIO_MIN, RATIO_MAX = 1e-8, 1e8
IPO_FALLBACK_SCALE = 1e4

ALGOS = ("IP3O", "PPO", "PPO_LAGRANGIAN", "P3O", "IPO")

# component codes for the counter-based seed split: toggling one component
# (e.g. adding a cost critic) must not perturb any other stream
_SEED_ENV = 0
_SEED_POLICY_INIT = 1
_SEED_VALUE_R_INIT = 2
_SEED_VALUE_C_INIT = 3
_SEED_COLLECT = 4
_SEED_POLICY_MB = 5
_SEED_VALUE_R_MB = 6
_SEED_VALUE_C_MB = 7
_SEED_EVAL = 8


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent RNG stream addressed by (master seed, component key)."""
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


# -- policies and critics --------------------------------------------------


class GaussianPolicy:
    """Tanh MLP mean head with a state-independent log-std vector."""

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator,
                 hidden=(64, 64), log_std_init: float = -0.5):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.mlp = dc.init_mlp([obs_dim, *hidden, act_dim], rng,
                               out_gain=0.01)
        self.log_std = dc.param(np.full(act_dim, float(log_std_init)))

    def params(self) -> list[dc.Node]:
        return self.mlp.nodes() + [self.log_std]

    def _log_std_np(self) -> np.ndarray:
        return np.clip(self.log_std.value, LOG_STD_MIN, LOG_STD_MAX)

    def _logp_from_mean(self, mean: np.ndarray, action) -> float:
        # shared by sample() and log_prob() so recorded log-probabilities
        # can be recomputed bitwise
        ls = self._log_std_np()
        z = (np.asarray(action, dtype=np.float64) - mean) / np.exp(ls)
        return float(-0.5 * (z * z).sum(axis=-1) - ls.sum()
                     - 0.5 * self.act_dim * math.log(2.0 * math.pi))

    def log_prob(self, obs, action) -> float:
        """Exact log-density of ``action`` for one observation."""
        mean = dc.mlp_forward_np(self.mlp, np.asarray(obs, dtype=np.float64))
        return self._logp_from_mean(mean, action)

    def sample(self, obs, rng: np.random.Generator):
        mean = dc.mlp_forward_np(self.mlp, np.asarray(obs, dtype=np.float64))
        action = mean + np.exp(self._log_std_np()) * rng.standard_normal(
            self.act_dim)
        return action, self._logp_from_mean(mean, action)

    def act_deterministic(self, obs) -> np.ndarray:
        return dc.mlp_forward_np(self.mlp, np.asarray(obs, dtype=np.float64))

    def log_prob_many_np(self, obs, actions) -> np.ndarray:
        mean = dc.mlp_forward_np(self.mlp, obs)
        ls = self._log_std_np()
        z = (actions - mean) / np.exp(ls)
        return (-0.5 * (z * z).sum(axis=-1) - ls.sum()
                - 0.5 * self.act_dim * math.log(2.0 * math.pi))

    def log_prob_node(self, obs, actions) -> dc.Node:
        mean = dc.mlp_forward(self.mlp, obs)
        ls = dc.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        return dc.gaussian_logp(mean, ls, actions)

    def entropy_np(self, obs=None) -> float:
        ls = self._log_std_np()
        return float(np.sum(ls + 0.5 * (1.0 + math.log(2.0 * math.pi))))

    def checkpoint_header(self) -> dict:
        return {"policy": "gaussian", "layer_sizes": self.mlp.layer_sizes,
                "log_std": self.act_dim}


class CategoricalPolicy:
    """Tanh MLP logits head over a discrete action set."""

    def __init__(self, obs_dim: int, n_actions: int,
                 rng: np.random.Generator, hidden=(64, 64)):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.mlp = dc.init_mlp([obs_dim, *hidden, n_actions], rng,
                               out_gain=0.01)

    def params(self) -> list[dc.Node]:
        return self.mlp.nodes()

    def _log_softmax_np(self, logits: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def log_prob(self, obs, action) -> float:
        logits = dc.mlp_forward_np(self.mlp, np.asarray(obs, np.float64))
        return float(self._log_softmax_np(logits)[int(action)])

    def sample(self, obs, rng: np.random.Generator):
        logits = dc.mlp_forward_np(self.mlp, np.asarray(obs, np.float64))
        logp_all = self._log_softmax_np(logits)
        action = int(rng.choice(self.n_actions, p=np.exp(logp_all)))
        return action, float(logp_all[action])

    def act_deterministic(self, obs) -> int:
        logits = dc.mlp_forward_np(self.mlp, np.asarray(obs, np.float64))
        return int(np.argmax(logits))

    def log_prob_many_np(self, obs, actions) -> np.ndarray:
        logits = dc.mlp_forward_np(self.mlp, obs)
        logp = self._log_softmax_np(logits)
        return logp[np.arange(len(actions)), actions.astype(np.intp)]

    def log_prob_node(self, obs, actions) -> dc.Node:
        logits = dc.mlp_forward(self.mlp, obs)
        shift = logits.value.max(axis=-1, keepdims=True)  # detached max
        shifted = dc.sub(logits, shift)
        lse = dc.log(dc.vsum(dc.exp(shifted), axis=1))
        picked = dc.pick(shifted, actions.astype(np.intp))
        return dc.sub(picked, lse)

    def entropy_np(self, obs) -> float:
        logits = dc.mlp_forward_np(self.mlp, np.atleast_2d(obs))
        logp = self._log_softmax_np(logits)
        return float(-(np.exp(logp) * logp).sum(axis=1).mean())

    def checkpoint_header(self) -> dict:
        return {"policy": "categorical", "layer_sizes": self.mlp.layer_sizes,
                "log_std": 0}


class Critic:
    """Tanh MLP with a scalar value head."""

    def __init__(self, obs_dim: int, rng: np.random.Generator,
                 hidden=(64, 64)):
        self.mlp = dc.init_mlp([obs_dim, *hidden, 1], rng, out_gain=1.0)

    def params(self) -> list[dc.Node]:
        return self.mlp.nodes()

    def value_np(self, obs):
        out = dc.mlp_forward_np(self.mlp, np.asarray(obs, np.float64))
        return out[..., 0]

    def value_node(self, obs) -> dc.Node:
        out = dc.mlp_forward(self.mlp, obs)
        return dc.vsum(out, axis=1)  # (B, 1) -> (B,)


def make_policy(env, rng: np.random.Generator, hidden=(64, 64),
                log_std_init: float = -0.5):
    if env.n_actions is not None:
        return CategoricalPolicy(env.obs_dim, env.n_actions, rng, hidden)
    return GaussianPolicy(env.obs_dim, env.action_dim, rng, hidden,
                          log_std_init)


# -- configuration ---------------------------------------------------------


@dataclass
class TrainerConfig:
    """Training hyper-parameters.  Defaults give the reference setup:
    [64, 64] tanh networks, lr 3e-4, gamma 0.99, GAE lambda 0.95 on both
    signals, clip 0.2, eta 20, 500 epochs of 5000 steps, minibatch 64."""

    algo: str = "IP3O"
    gamma: float = 0.99
    gae_lambda: float = 0.95
    cost_gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    eta: float = 20.0
    alpha: float = 0.5
    h: float | None = None
    cost_limits: tuple = (25.0,)
    epochs: int = 500
    steps_per_epoch: int = 5000
    minibatch_size: int = 64
    policy_lr: float = 3e-4
    value_lr: float = 3e-4
    update_epochs: int = 10
    kl_lo: float = 0.0
    kl_hi: float = 0.02
    seed: int = 0
    hidden_sizes: tuple = (64, 64)
    log_std_init: float = -0.5
    grad_clip: float | None = 0.5
    ratio_clip_mode: str = "literal"
    jc_discounted: bool = False
    lambda_lr: float = 0.01
    ipo_t: float = 20.0
    value_update_epochs: int | None = None  # defaults to update_epochs

    def __post_init__(self):
        self.cost_limits = tuple(float(d) for d in self.cost_limits)
        self.hidden_sizes = tuple(int(s) for s in self.hidden_sizes)
        if self.algo not in ALGOS:
            raise ParameterError(f"algo must be one of {ALGOS}, "
                                 f"got {self.algo!r}")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ParameterError("clip_epsilon must lie in (0, 1)")
        if not self.eta >= 0.0:
            raise ParameterError("eta must be >= 0")
        if self.algo in ("IP3O", "P3O", "IPO") and not self.eta > 0:
            raise ParameterError(f"{self.algo} requires eta > 0")
        if not self.alpha > 0:
            raise ParameterError("alpha must be > 0")
        if self.h is not None and not 0 < self.h < min(self.alpha, 1.0):
            raise ParameterError("h must lie in (0, min(alpha, 1))")
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError("gamma must lie in (0, 1)")
        for name in ("gae_lambda", "cost_gae_lambda"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ParameterError("epochs must be >= 0 and steps_per_epoch "
                                 ">= 1")
        if self.minibatch_size < 1 or self.update_epochs < 1:
            raise ParameterError("minibatch_size and update_epochs must be "
                                 ">= 1")
        if self.value_update_epochs is not None \
                and self.value_update_epochs < 1:
            raise ParameterError("value_update_epochs must be >= 1")
        if self.policy_lr < 0 or self.value_lr < 0:
            raise ParameterError("learning rates must be >= 0")
        if self.kl_hi < self.kl_lo:
            raise ParameterError("kl window is empty (kl_hi < kl_lo)")
        if self.ratio_clip_mode not in ("literal", "standard"):
            raise ParameterError("ratio_clip_mode must be 'literal' or "
                                 "'standard'")

    @property
    def n_constraints(self) -> int:
        return len(self.cost_limits)


@dataclass
class LossReport:
    """Loss decomposition of one evaluation; always satisfies
    total == loss_r + eta * sum(penalty_terms)."""

    loss_r: float
    loss_c: list
    penalty_terms: list
    total: float
    approx_kl: float
    jc: list
    entropy: float
    ratio_cap_hits: int = 0
    ipo_fallback: bool = False
    aborted: bool = False


# -- ratio helpers (pure) ----------------------------------------------------


def ratio(new_logp, old_logp):
    """Importance ratio exp(new - old), capped to [1e-8, 1e8]."""
    return np.clip(np.exp(np.asarray(new_logp) - np.asarray(old_logp)),
                   RATIO_MIN, RATIO_MAX)


def clip_reward_ratio(r, eps: float):
    """r' = min(r, clip(r, 1-eps, 1+eps)) — upper clip only."""
    return np.minimum(r, np.clip(r, 1.0 - eps, 1.0 + eps))


def clip_cost_ratio(r, eps: float):
    """r'' = max(r, clip(r, 1-eps, 1+eps)) — lower clip only."""
    return np.maximum(r, np.clip(r, 1.0 - eps, 1.0 + eps))


# -- loss graphs -------------------------------------------------------------


def _ratio_node(batch: AdvantageBatch, policy) -> tuple[dc.Node, int]:
    new_logp = policy.log_prob_node(batch.obs, batch.actions)
    raw = dc.exp(dc.sub(new_logp, batch.old_logp))
    cap_hits = int(np.count_nonzero((raw.value < RATIO_MIN)
                                    | (raw.value > RATIO_MAX)))
    return dc.clip(raw, RATIO_MIN, RATIO_MAX), cap_hits


def reward_loss(batch: AdvantageBatch, policy, cfg: TrainerConfig,
                r: dc.Node | None = None) -> dc.Node:
    """Mean of -r'(theta) * A_R over the batch."""
    if len(batch) == 0:
        raise EmptyBatchError("reward_loss on an empty batch")
    if r is None:
        r, _ = _ratio_node(batch, policy)
    eps = cfg.clip_epsilon
    if cfg.ratio_clip_mode == "literal":
        r_prime = dc.minimum(r, dc.clip(r, 1.0 - eps, 1.0 + eps))
        return dc.neg(dc.vmean(dc.mul(r_prime, batch.adv_r)))
    surr = dc.minimum(dc.mul(r, batch.adv_r),
                      dc.mul(dc.clip(r, 1.0 - eps, 1.0 + eps), batch.adv_r))
    return dc.neg(dc.vmean(surr))


def cost_loss_i(batch: AdvantageBatch, policy, i: int, cfg: TrainerConfig,
                r: dc.Node | None = None) -> dc.Node:
    """Cost surrogate for constraint i:
    (1/(1-gamma)) * mean(r''(theta) * A_Ci) + (Jc_i - d_i).
    Only the expectation carries gradient; Jc_i and d_i are constants."""
    if len(batch) == 0:
        raise EmptyBatchError("cost_loss_i on an empty batch")
    if r is None:
        r, _ = _ratio_node(batch, policy)
    eps = cfg.clip_epsilon
    scale = 1.0 / (1.0 - cfg.gamma)
    gap = float(batch.jc[i]) - cfg.cost_limits[i]
    if cfg.ratio_clip_mode == "literal":
        r_pp = dc.maximum(r, dc.clip(r, 1.0 - eps, 1.0 + eps))
        expectation = dc.vmean(dc.mul(r_pp, batch.adv_c[:, i]))
    else:
        surr = dc.maximum(
            dc.mul(r, batch.adv_c[:, i]),
            dc.mul(dc.clip(r, 1.0 - eps, 1.0 + eps), batch.adv_c[:, i]))
        expectation = dc.vmean(surr)
    return dc.add(dc.mul(expectation, scale), gap)


def total_loss(batch: AdvantageBatch, policy, cfg: TrainerConfig,
               lam: np.ndarray | None = None,
               want_entropy: bool = False) -> tuple[dc.Node, LossReport]:
    """Combined loss for the configured algorithm; see module docstring."""
    if len(batch) == 0:
        raise EmptyBatchError("total_loss on an empty batch")
    m = cfg.n_constraints
    r, cap_hits = _ratio_node(batch, policy)
    loss_r = reward_loss(batch, policy, cfg, r)

    penalty_nodes: list[dc.Node] = []
    loss_c_vals: list[float] = []
    penalty_vals: list[float] = []
    ipo_fallback = False

    if cfg.algo == "PPO":
        # cost surrogates are reported but kept out of the objective
        rv = r.value
        r_pp = clip_cost_ratio(rv, cfg.clip_epsilon)
        for i in range(m):
            val = (float(np.mean(r_pp * batch.adv_c[:, i]))
                   / (1.0 - cfg.gamma)
                   + float(batch.jc[i]) - cfg.cost_limits[i])
            loss_c_vals.append(val)
            penalty_vals.append(0.0)
        total = loss_r
    else:
        for i in range(m):
            lc = cost_loss_i(batch, policy, i, cfg, r)
            loss_c_vals.append(float(lc.value))
            if cfg.algo == "IP3O":
                pen = (dc.celu_clamped(lc, cfg.alpha, cfg.h)
                       if cfg.h is not None else dc.celu(lc, cfg.alpha))
                term = dc.mul(pen, cfg.eta)
            elif cfg.algo == "P3O":
                pen = dc.relu(lc)
                term = dc.mul(pen, cfg.eta)
            elif cfg.algo == "IPO":
                if float(lc.value) >= 0.0:
                    ipo_fallback = True
                    term = dc.mul(lc, IPO_FALLBACK_SCALE)
                else:
                    term = dc.mul(dc.log(dc.neg(lc)), -1.0 / cfg.ipo_t)
            elif cfg.algo == "PPO_LAGRANGIAN":
                lam_i = float(lam[i]) if lam is not None else 0.0
                term = dc.mul(lc, lam_i)
            else:  # pragma: no cover
                raise ParameterError(f"unhandled algo {cfg.algo}")
            penalty_nodes.append(term)
            penalty_vals.append(float(term.value) / cfg.eta if cfg.eta > 0
                                else float(term.value))
        total = loss_r
        for term in penalty_nodes:
            total = dc.add(total, term)

    kl = kl_estimate(policy, batch)
    entropy = policy.entropy_np(batch.obs) if want_entropy else 0.0
    report = LossReport(
        loss_r=float(loss_r.value),
        loss_c=loss_c_vals,
        penalty_terms=penalty_vals,
        total=float(total.value),
        approx_kl=kl,
        jc=[float(batch.jc[i]) for i in range(m)],
        entropy=entropy,
        ratio_cap_hits=cap_hits,
        ipo_fallback=ipo_fallback,
    )
    return total, report


def kl_estimate(policy, batch: AdvantageBatch) -> float:
    """Sample estimate of KL(pi_new || pi_old) on old-policy samples:
    mean(r * log r), floored at 0 since the exact KL is non-negative."""
    new_logp = policy.log_prob_many_np(batch.obs, batch.actions)
    delta = new_logp - batch.old_logp
    return max(float(np.mean(np.exp(delta) * delta)), 0.0)


def lagrange_update(lambda_k: float, jc: float, d: float,
                    lr_lambda: float) -> float:
    """Projected ascent on the multiplier: max(0, lambda + lr*(jc - d))."""
    return max(0.0, lambda_k + lr_lambda * (jc - d))


# -- updates -----------------------------------------------------------------


def _clip_grad(flat_g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return flat_g
    norm = float(np.sqrt(np.sum(flat_g * flat_g)))
    if norm > max_norm and norm > 0.0:
        return flat_g * (max_norm / norm)
    return flat_g


def _mean_reports(reports: list[LossReport], kl: float) -> LossReport:
    n = len(reports)
    m = len(reports[0].loss_c)
    return LossReport(
        loss_r=sum(r.loss_r for r in reports) / n,
        loss_c=[sum(r.loss_c[i] for r in reports) / n for i in range(m)],
        penalty_terms=[sum(r.penalty_terms[i] for r in reports) / n
                       for i in range(m)],
        total=sum(r.total for r in reports) / n,
        approx_kl=kl,
        jc=reports[0].jc,
        entropy=reports[0].entropy,
        ratio_cap_hits=sum(r.ratio_cap_hits for r in reports),
        ipo_fallback=any(r.ipo_fallback for r in reports),
    )


def policy_update(batch: AdvantageBatch, policy, cfg: TrainerConfig,
                  opt_state: dc.AdamState, mb_rng: np.random.Generator,
                  lam: np.ndarray | None = None):
    """Up to ``update_epochs`` minibatch passes on the combined loss.

    After each pass the approximate KL to the data-collecting policy is
    measured on the full batch; the loop stops once it leaves
    [kl_lo, kl_hi].  A non-finite loss or gradient aborts the update and
    restores the pre-update parameters.  ``policy_lr == 0`` runs the loop
    without touching parameters (the optimizer itself requires lr > 0).

    Returns (reports, opt_state).
    """
    params = policy.params()
    snapshot = dc.flatten_nodes(params)
    snap_state = opt_state
    vec = snapshot.copy()
    reports: list[LossReport] = []
    n = len(batch)

    for _ in range(cfg.update_epochs):
        perm = mb_rng.permutation(n)
        pass_reports = []
        try:
            for lo in range(0, n, cfg.minibatch_size):
                mb = batch.take(perm[lo:lo + cfg.minibatch_size])
                loss, rep = total_loss(mb, policy, cfg, lam)
                pass_reports.append(rep)
                if cfg.policy_lr == 0.0:
                    continue
                gmap = dc.backward(loss, params)
                flat_g = np.concatenate(
                    [gmap[id(p)].ravel() for p in params])
                flat_g = _clip_grad(flat_g, cfg.grad_clip)
                vec, opt_state = dc.adam_step(vec, flat_g, opt_state,
                                              cfg.policy_lr)
                dc.assign_flat(params, vec)
        except NumericOverflowError:
            dc.assign_flat(params, snapshot)
            opt_state = snap_state
            m = cfg.n_constraints
            aborted = _mean_reports(pass_reports, 0.0) if pass_reports else \
                LossReport(math.nan, [math.nan] * m, [math.nan] * m,
                           math.nan, 0.0,
                           [float(batch.jc[i]) for i in range(m)], 0.0)
            aborted.aborted = True
            reports.append(aborted)
            return reports, opt_state

        kl = kl_estimate(policy, batch)
        reports.append(_mean_reports(pass_reports, kl))
        if kl < cfg.kl_lo or kl > cfg.kl_hi:
            break
    return reports, opt_state


def value_update(batch: AdvantageBatch, critics, cfg: TrainerConfig,
                 opt_states: list[dc.AdamState],
                 mb_rngs: list[np.random.Generator]):
    """Squared-error regression of each critic toward its returns."""
    v_critic, c_critics = critics
    all_critics = [v_critic] + list(c_critics)
    targets = [batch.ret_r] + [batch.ret_c[:, i]
                               for i in range(len(c_critics))]
    n = len(batch)
    passes = (cfg.value_update_epochs if cfg.value_update_epochs is not None
              else cfg.update_epochs)
    new_states = list(opt_states)
    for ci, (critic, target, rng) in enumerate(
            zip(all_critics, targets, mb_rngs)):
        params = critic.params()
        state = new_states[ci]
        snapshot = dc.flatten_nodes(params)
        snap_state = state
        vec = snapshot.copy()
        try:
            for _ in range(passes):
                perm = rng.permutation(n)
                for lo in range(0, n, cfg.minibatch_size):
                    idx = perm[lo:lo + cfg.minibatch_size]
                    if cfg.value_lr == 0.0:
                        continue
                    pred = critic.value_node(batch.obs[idx])
                    loss = dc.mse(pred, target[idx])
                    gmap = dc.backward(loss, params)
                    flat_g = np.concatenate(
                        [gmap[id(p)].ravel() for p in params])
                    flat_g = _clip_grad(flat_g, cfg.grad_clip)
                    vec, state = dc.adam_step(vec, flat_g, state,
                                              cfg.value_lr)
                    dc.assign_flat(params, vec)
        except NumericOverflowError:
            dc.assign_flat(params, snapshot)
            state = snap_state
        new_states[ci] = state
    return new_states


# -- the training loop -------------------------------------------------------


class Trainer:
    """Owns the policy, critics, optimizer states, and the per-component
    RNG streams of one training run."""

    def __init__(self, cfg: TrainerConfig, env):
        self.cfg = cfg
        self.env = env
        m = cfg.n_constraints
        if m > env.n_costs:
            raise ParameterError(
                f"config declares {m} constraints but the environment "
                f"emits only {env.n_costs} cost signals")
        self.policy = make_policy(env, stream(cfg.seed, _SEED_POLICY_INIT),
                                  cfg.hidden_sizes, cfg.log_std_init)
        self.v_critic = Critic(env.obs_dim,
                               stream(cfg.seed, _SEED_VALUE_R_INIT),
                               cfg.hidden_sizes)
        self.c_critics = [Critic(env.obs_dim,
                                 stream(cfg.seed, _SEED_VALUE_C_INIT, i),
                                 cfg.hidden_sizes)
                          for i in range(m)]
        self.policy_opt = dc.adam_init(
            sum(p.value.size for p in self.policy.params()))
        self.value_opts = [dc.adam_init(
            sum(p.value.size for p in c.params()))
            for c in [self.v_critic] + self.c_critics]
        self.lam = np.zeros(m)
        self.steps_done = 0
        self.history: list[dict] = []

    @property
    def critics(self):
        return self.v_critic, self.c_critics

    def run_epoch(self, k: int) -> dict:
        cfg = self.cfg
        m = cfg.n_constraints
        seed_k = int(stream(cfg.seed, _SEED_COLLECT, k).integers(2 ** 62))
        trajs = collect(self.policy, self.env, cfg.steps_per_epoch, seed_k,
                        self.critics)
        batch = build_batch(trajs, cfg.gamma, cfg.gae_lambda,
                            cfg.cost_gae_lambda, cfg.jc_discounted)

        if cfg.algo == "PPO_LAGRANGIAN":
            self.lam = np.array([
                lagrange_update(self.lam[i], float(batch.jc[i]),
                                cfg.cost_limits[i], cfg.lambda_lr)
                for i in range(m)])

        _, pre = total_loss(batch, self.policy, cfg, self.lam,
                            want_entropy=True)

        mb_rngs = ([stream(cfg.seed, _SEED_VALUE_R_MB, k)]
                   + [stream(cfg.seed, _SEED_VALUE_C_MB, k, i)
                      for i in range(m)])
        self.value_opts = value_update(batch, self.critics, cfg,
                                       self.value_opts, mb_rngs)
        reports, self.policy_opt = policy_update(
            batch, self.policy, cfg, self.policy_opt,
            stream(cfg.seed, _SEED_POLICY_MB, k), self.lam)

        self.steps_done += cfg.steps_per_epoch
        ep_ret = (float(batch.ep_returns.mean())
                  if len(batch.ep_returns) else math.nan)
        if len(batch.ep_costs) and m:
            limits = np.asarray(cfg.cost_limits)
            violation = float(np.mean(
                np.any(batch.ep_costs[:, :m] > limits, axis=1)))
        else:
            violation = 0.0
        row = {
            "epoch": k,
            "steps": self.steps_done,
            "return": ep_ret,
            "cost": [float(batch.jc[i]) for i in range(m)],
            "violation_rate": violation,
            "loss_r": pre.loss_r,
            "loss_c": list(pre.loss_c),
            "loss_total": pre.total,
            "kl": reports[-1].approx_kl if reports else 0.0,
            "entropy": pre.entropy,
            "n_policy_passes": len(reports),
            "aborted": any(r.aborted for r in reports),
        }
        self.history.append(row)
        return row

    def train(self, on_epoch=None) -> list[dict]:
        """Run all epochs; metric rows stream through ``on_epoch`` so a
        mid-run failure leaves partial history behind."""
        for k in range(self.cfg.epochs):
            row = self.run_epoch(k)
            if on_epoch is not None:
                on_epoch(k, row, self)
        return self.history


def train(cfg: TrainerConfig, env, on_epoch=None) -> list[dict]:
    """Convenience wrapper: build a Trainer and run it."""
    return Trainer(cfg, env).train(on_epoch)


# -- agent checkpoints -------------------------------------------------------


def save_policy(path, policy) -> None:
    header = policy.checkpoint_header()
    dc.save_flat(path, header, dc.flatten_nodes(policy.params()))


def load_policy(path):
    header, vec = dc.load_flat(path)
    sizes = header.get("layer_sizes")
    kind = header.get("policy")
    rng = np.random.default_rng(0)
    if kind == "gaussian":
        policy = GaussianPolicy(sizes[0], sizes[-1], rng, sizes[1:-1])
    elif kind == "categorical":
        policy = CategoricalPolicy(sizes[0], sizes[-1], rng, sizes[1:-1])
    else:
        raise CheckpointError(f"unknown policy kind {kind!r}")
    params = policy.params()
    total = sum(p.value.size for p in params)
    if vec.size != total:
        raise CheckpointError(f"checkpoint holds {vec.size} floats, the "
                              f"declared architecture needs {total}")
    dc.assign_flat(params, vec)
    return policy


def save_critic(path, critic: Critic) -> None:
    dc.save_flat(path, {"layer_sizes": critic.mlp.layer_sizes},
                 dc.flatten_nodes(critic.params()))


# -- deterministic evaluation -------------------------------------------------


def evaluate_policy(policy, env, episodes: int, seed: int,
                    cost_limits=()) -> dict:
    """Roll the deterministic (mean / argmax) policy for N episodes."""
    if episodes < 1:
        raise ParameterError("episodes must be >= 1")
    env_seeder = stream(seed, _SEED_EVAL)
    box = env.action_dim is not None
    returns, costs = [], []
    for _ in range(episodes):
        obs = env.reset(int(env_seeder.integers(2 ** 62)))
        total_r = 0.0
        total_c = np.zeros(env.n_costs)
        while True:
            action = policy.act_deterministic(obs)
            if box:
                action = np.clip(action, env.action_low, env.action_high)
            step = env.step(action)
            total_r += step.reward
            total_c += step.costs
            obs = step.observation
            if step.terminated or step.truncated:
                break
        returns.append(total_r)
        costs.append(total_c)
    costs = np.asarray(costs)
    limits = np.asarray(cost_limits) if len(cost_limits) else None
    violation = (float(np.mean(np.any(costs[:, :len(limits)] > limits,
                                      axis=1)))
                 if limits is not None and costs.shape[1] else 0.0)
    return {
        "episodes": episodes,
        "mean_return": float(np.mean(returns)),
        "mean_cost": [float(x) for x in costs.mean(axis=0)],
        "violation_rate": violation,
    }
