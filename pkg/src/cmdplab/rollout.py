"""Trajectory collection and advantage estimation.

``collect`` gathers exactly ``n_steps`` environment steps under the
sampling policy, cutting episodes at the env horizon (and, for the last
one, at the step budget).  ``gae`` is the standard exponentially weighted
temporal-difference recursion; ``build_batch`` flattens trajectories into
one training batch, normalizing reward advantages (mean 0, variance 1)
while leaving cost advantages untouched so that the calibrated sum with
the budget gap in the cost surrogate keeps its scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, ShapeError


@dataclass
class Trajectory:
    """Per-step records of one (possibly cut) episode."""

    obs: np.ndarray          # (T, obs_dim)
    actions: np.ndarray      # (T,) int or (T, act_dim)
    logp: np.ndarray         # (T,) log-probability under the sampling policy
    rewards: np.ndarray      # (T,)
    costs: np.ndarray        # (T, m)
    v_r: np.ndarray          # (T,) reward-value predictions
    v_c: np.ndarray          # (T, m) cost-value predictions
    terminated: bool         # env reported a terminal transition
    truncated: bool          # env horizon reached
    final_v_r: float         # bootstrap value of the state after the last step
    final_v_c: np.ndarray    # (m,)

    def __len__(self):
        return len(self.rewards)

    @property
    def finished(self) -> bool:
        """True when the episode ended in the environment (not batch-cut)."""
        return self.terminated or self.truncated


def collect(policy, env, n_steps: int, seed: int, critics=None):
    """Roll out the policy for exactly ``n_steps`` total steps.

    ``critics`` is an optional (reward_critic, [cost_critics...]) pair; when
    omitted all value predictions are zero.  Log-probabilities are the exact
    sampling log-densities, recorded per step on the single-observation code
    path so they can be recomputed bitwise afterwards.
    """
    if n_steps < 1:
        raise EmptyBatchError(f"n_steps must be >= 1, got {n_steps}")
    ss = np.random.SeedSequence(seed)
    ss_env, ss_act = ss.spawn(2)
    env_seeder = np.random.default_rng(ss_env)
    rng_act = np.random.default_rng(ss_act)

    box = env.action_dim is not None
    m = env.n_costs
    trajectories = []
    steps_left = n_steps

    while steps_left > 0:
        obs = env.reset(int(env_seeder.integers(2 ** 62)))
        obs_l, act_l, logp_l, rew_l, cost_l = [], [], [], [], []
        terminated = truncated = False
        while steps_left > 0:
            action, logp = policy.sample(obs, rng_act)
            if box:
                env_action = np.clip(action, env.action_low, env.action_high)
            else:
                env_action = action
            step = env.step(env_action)
            obs_l.append(obs)
            act_l.append(action)
            logp_l.append(logp)
            rew_l.append(step.reward)
            cost_l.append(step.costs)
            obs = step.observation
            steps_left -= 1
            if step.terminated or step.truncated:
                terminated = step.terminated
                truncated = step.truncated
                break

        T = len(rew_l)
        obs_a = np.asarray(obs_l)
        if critics is not None:
            v_critic, c_critics = critics
            v_r = v_critic.value_np(obs_a)
            v_c = (np.stack([c.value_np(obs_a) for c in c_critics], axis=1)
                   if c_critics else np.zeros((T, m)))
            if terminated:
                final_v_r, final_v_c = 0.0, np.zeros(m)
            else:
                final_v_r = float(v_critic.value_np(obs))
                final_v_c = (np.array([float(c.value_np(obs))
                                       for c in c_critics])
                             if c_critics else np.zeros(m))
        else:
            v_r = np.zeros(T)
            v_c = np.zeros((T, m))
            final_v_r, final_v_c = 0.0, np.zeros(m)

        trajectories.append(Trajectory(
            obs=obs_a,
            actions=np.asarray(act_l),
            logp=np.asarray(logp_l),
            rewards=np.asarray(rew_l),
            costs=np.asarray(cost_l).reshape(T, m),
            v_r=v_r,
            v_c=v_c,
            terminated=terminated,
            truncated=truncated,
            final_v_r=final_v_r,
            final_v_c=final_v_c,
        ))
    return trajectories


def gae(rewards, values, terminal_flags, gamma: float, lam: float,
        last_value: float = 0.0) -> np.ndarray:
    """Generalized advantage estimation by the backward recursion.

    ``terminal_flags[t]`` marks a terminal transition at step t (no
    bootstrap across it).  ``last_value`` is the bootstrap for the state
    after the final step; leave 0 at termination, pass the critic's
    prediction at truncation.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    flags = np.asarray(terminal_flags, dtype=bool)
    if not (rewards.shape == values.shape == flags.shape):
        raise ShapeError(f"gae arrays disagree: {rewards.shape}, "
                         f"{values.shape}, {flags.shape}")
    T = len(rewards)
    adv = np.empty(T)
    next_value = last_value
    next_adv = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 0.0 if flags[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv


@dataclass
class AdvantageBatch:
    """Flattened training batch with advantages, returns, and episode-level
    cost statistics."""

    obs: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    adv_r: np.ndarray        # normalized to mean 0 / variance 1
    adv_c: np.ndarray        # (N, m), deliberately NOT normalized
    ret_r: np.ndarray
    ret_c: np.ndarray        # (N, m)
    jc: np.ndarray           # (m,) mean episodic cost over finished episodes
    n_episodes: int
    ep_returns: np.ndarray   # (E,) finished-episode undiscounted returns
    ep_costs: np.ndarray     # (E, m) finished-episode undiscounted costs

    def __len__(self):
        return len(self.old_logp)

    def take(self, idx) -> "AdvantageBatch":
        """Minibatch view (episode-level stats are carried through)."""
        return AdvantageBatch(
            self.obs[idx], self.actions[idx], self.old_logp[idx],
            self.adv_r[idx], self.adv_c[idx], self.ret_r[idx],
            self.ret_c[idx], self.jc, self.n_episodes, self.ep_returns,
            self.ep_costs)


def build_batch(trajectories, gamma: float, lam: float,
                cost_lam: float | None = None,
                jc_discounted: bool = False) -> AdvantageBatch:
    """Flatten trajectories into one batch.

    The episodic cost estimate jc averages undiscounted per-episode cost
    sums over finished episodes (discounted sums when ``jc_discounted``);
    if no episode finished inside the batch, the cut ones are used.
    """
    if not trajectories or sum(len(t) for t in trajectories) == 0:
        raise EmptyBatchError("build_batch needs at least one step")
    if cost_lam is None:
        cost_lam = lam

    m = trajectories[0].costs.shape[1]
    adv_r_l, adv_c_l, ret_r_l, ret_c_l = [], [], [], []
    for traj in trajectories:
        T = len(traj)
        flags = np.zeros(T, dtype=bool)
        flags[-1] = traj.terminated
        boot_r = 0.0 if traj.terminated else traj.final_v_r
        a_r = gae(traj.rewards, traj.v_r, flags, gamma, lam, boot_r)
        adv_r_l.append(a_r)
        ret_r_l.append(a_r + traj.v_r)
        a_c = np.empty((T, m))
        r_c = np.empty((T, m))
        for i in range(m):
            boot_c = 0.0 if traj.terminated else float(traj.final_v_c[i])
            a_c[:, i] = gae(traj.costs[:, i], traj.v_c[:, i], flags, gamma,
                            cost_lam, boot_c)
            r_c[:, i] = a_c[:, i] + traj.v_c[:, i]
        adv_c_l.append(a_c)
        ret_c_l.append(r_c)

    adv_r = np.concatenate(adv_r_l)
    std = adv_r.std()
    if std < 1e-8:
        adv_r = adv_r - adv_r.mean()
    else:
        adv_r = (adv_r - adv_r.mean()) / std

    finished = [t for t in trajectories if t.finished]
    basis = finished if finished else trajectories

    def episode_cost(t: Trajectory) -> np.ndarray:
        if jc_discounted:
            return (gamma ** np.arange(len(t))[:, None] * t.costs).sum(axis=0)
        return t.costs.sum(axis=0)

    ep_cost_sums = np.array([episode_cost(t) for t in basis]).reshape(
        len(basis), m)
    jc = ep_cost_sums.mean(axis=0)

    ep_returns = np.array([t.rewards.sum() for t in finished])
    ep_costs = (np.array([t.costs.sum(axis=0) for t in finished])
                if finished else np.zeros((0, m)))

    return AdvantageBatch(
        obs=np.concatenate([t.obs for t in trajectories]),
        actions=np.concatenate([t.actions for t in trajectories]),
        old_logp=np.concatenate([t.logp for t in trajectories]),
        adv_r=adv_r,
        adv_c=np.concatenate(adv_c_l),
        ret_r=np.concatenate(ret_r_l),
        ret_c=np.concatenate(ret_c_l),
        jc=jc,
        n_episodes=len(finished),
        ep_returns=ep_returns,
        ep_costs=ep_costs,
    )
