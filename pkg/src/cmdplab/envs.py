"""Desk-scale CMDP environments behind one small interface.

Two built-ins:

* ``PondWorld`` — a stochastic gridworld: reach the goal cell while not
  slipping into water.  The intended move succeeds with probability
  1 - slip; otherwise one of the two perpendicular moves is taken
  uniformly.  Moves off the grid keep the agent in place.  Entering a
  water cell costs ``water_cost`` and terminates; reaching the goal pays
  ``goal_reward`` and terminates; every step additionally pays
  ``step_reward``.  Exact tabular export via ``as_tabular``.

* ``PointMass`` — 1-d velocity-constrained point mass: v' = v + a*dt,
  x' = x + v'*dt, reward = reward_scale * v', cost 1 whenever
  |v'| > v_lim; truncates at the horizon.

Both environments own a private RNG reseeded by ``reset(seed)``, so a
(seed, action-sequence) pair fully determines the emitted steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DomainError, ParameterError, ShapeError,
                     UnsupportedEnvironmentError)


@dataclass
class CmdpStep:
    """One transition: observation after the step, reward, per-constraint
    costs, and the episode-end flags."""

    observation: np.ndarray
    reward: float
    costs: np.ndarray
    terminated: bool
    truncated: bool


@dataclass
class TabularCMDP:
    """Explicit finite CMDP: transition tensor P[s, a, s'], reward R[s, a],
    costs C[i, s, a], discount gamma, initial distribution rho."""

    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    gamma: float
    rho: np.ndarray

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        S, A = self.n_states, self.n_actions
        if self.transition.shape != (S, A, S):
            raise ShapeError(f"transition shape {self.transition.shape}, "
                             f"expected {(S, A, S)}")
        if self.reward.shape != (S, A):
            raise ShapeError(f"reward shape {self.reward.shape}")
        if self.cost.ndim == 2:
            self.cost = self.cost[None]
        if self.cost.shape[1:] != (S, A):
            raise ShapeError(f"cost shape {self.cost.shape}")
        if self.rho.shape != (S,):
            raise ShapeError(f"rho shape {self.rho.shape}")
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must be in (0,1), got {self.gamma}")
        row_sums = self.transition.sum(axis=2)
        if np.any(np.abs(row_sums - 1.0) > 1e-12):
            raise ParameterError("each P[s, a] must sum to 1 within 1e-12")
        if abs(self.rho.sum() - 1.0) > 1e-12:
            raise ParameterError("rho must sum to 1")

    @property
    def n_constraints(self) -> int:
        return self.cost.shape[0]


class CmdpEnv:
    """Common environment interface used by the rollout collector."""

    obs_dim: int
    n_costs: int
    horizon: int
    # discrete envs set n_actions; continuous ones set action_dim + bounds
    n_actions: int | None = None
    action_dim: int | None = None
    action_low: float | None = None
    action_high: float | None = None

    def reset(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> CmdpStep:
        raise NotImplementedError

    def as_tabular(self, gamma: float) -> TabularCMDP:
        raise UnsupportedEnvironmentError(
            f"{type(self).__name__} has no exact tabular representation")


# -- pond gridworld --------------------------------------------------------

# action index -> (drow, dcol): up, right, down, left
_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
# perpendicular action pairs for slips
_PERP = {0: (3, 1), 2: (3, 1), 1: (0, 2), 3: (0, 2)}


def _default_water():
    return frozenset({(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3)})


@dataclass(frozen=True)
class PondWorldConfig:
    rows: int = 5
    cols: int = 5
    start: tuple[int, int] = (4, 0)
    goal: tuple[int, int] = (0, 4)
    water: frozenset = field(default_factory=_default_water)
    slip: float = 0.1
    step_reward: float = 0.0
    goal_reward: float = 1.0
    water_cost: float = 1.0
    horizon: int = 200

    def __post_init__(self):
        cells = {self.start, self.goal} | set(self.water)
        for (r, c) in cells:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise ParameterError(f"cell {(r, c)} outside the grid")
        if self.start in self.water or self.goal in self.water:
            raise ParameterError("start and goal must not be water cells")
        if not 0.0 <= self.slip < 1.0:
            raise ParameterError(f"slip must be in [0,1), got {self.slip}")
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")


class PondWorld(CmdpEnv):
    """Gridworld with slippery moves and terminal water cells."""

    def __init__(self, config: PondWorldConfig | None = None):
        self.config = config or PondWorldConfig()
        cfg = self.config
        self.obs_dim = cfg.rows * cfg.cols
        self.n_actions = 4
        self.n_costs = 1
        self.horizon = cfg.horizon
        self._rng = np.random.default_rng(0)
        self._cell = cfg.start
        self._t = 0
        self._done = True

    def _obs(self) -> np.ndarray:
        out = np.zeros(self.obs_dim)
        out[self._cell[0] * self.config.cols + self._cell[1]] = 1.0
        return out

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._cell = self.config.start
        self._t = 0
        self._done = False
        return self._obs()

    def _move(self, cell, action) -> tuple[int, int]:
        dr, dc = _MOVES[action]
        r, c = cell[0] + dr, cell[1] + dc
        if not (0 <= r < self.config.rows and 0 <= c < self.config.cols):
            return cell
        return (r, c)

    def step(self, action) -> CmdpStep:
        if self._done:
            raise DomainError("episode finished; call reset first")
        action = int(action)
        if not 0 <= action < 4:
            raise DomainError(f"action must be in 0..3, got {action}")
        cfg = self.config
        if cfg.slip > 0.0 and self._rng.random() < cfg.slip:
            action = _PERP[action][int(self._rng.integers(2))]
        self._cell = self._move(self._cell, action)
        self._t += 1

        reward = cfg.step_reward
        cost = 0.0
        terminated = False
        if self._cell in cfg.water:
            cost = cfg.water_cost
            terminated = True
        elif self._cell == cfg.goal:
            reward += cfg.goal_reward
            terminated = True
        truncated = not terminated and self._t >= cfg.horizon
        self._done = terminated or truncated
        return CmdpStep(self._obs(), reward, np.array([cost]), terminated,
                        truncated)

    def as_tabular(self, gamma: float) -> TabularCMDP:
        """Exact enumeration of the step() dynamics.  Water and goal cells
        are absorbing with zero reward and cost."""
        cfg = self.config
        S = cfg.rows * cfg.cols
        A = 4
        idx = lambda cell: cell[0] * cfg.cols + cell[1]
        terminal = set(cfg.water) | {cfg.goal}

        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        C = np.zeros((1, S, A))
        for r in range(cfg.rows):
            for c in range(cfg.cols):
                s = idx((r, c))
                if (r, c) in terminal:
                    P[s, :, s] = 1.0
                    continue
                for a in range(A):
                    outcomes = [(a, 1.0 - cfg.slip)]
                    for pa in _PERP[a]:
                        outcomes.append((pa, cfg.slip / 2.0))
                    for move, p in outcomes:
                        if p == 0.0:
                            continue
                        nxt = self._move((r, c), move)
                        P[s, a, idx(nxt)] += p
                        R[s, a] += p * cfg.step_reward
                        if nxt in cfg.water:
                            C[0, s, a] += p * cfg.water_cost
                        elif nxt == cfg.goal:
                            R[s, a] += p * cfg.goal_reward

        rho = np.zeros(S)
        rho[idx(cfg.start)] = 1.0
        return TabularCMDP(S, A, P, R, C, gamma, rho)


# -- velocity-constrained point mass ---------------------------------------


@dataclass(frozen=True)
class PointMassConfig:
    dt: float = 0.1
    max_accel: float = 1.0
    v_lim: float = 1.0
    horizon: int = 200
    reward_scale: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ParameterError(f"dt must be > 0, got {self.dt}")
        if not self.max_accel > 0:
            raise ParameterError("max_accel must be > 0")
        if not self.v_lim > 0:
            raise ParameterError("v_lim must be > 0")
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        if not np.isfinite(self.reward_scale):
            raise ParameterError("reward_scale must be finite")


class PointMass(CmdpEnv):
    """Run as fast as allowed: reward tracks forward speed, cost counts
    steps spent above the velocity limit."""

    def __init__(self, config: PointMassConfig | None = None):
        self.config = config or PointMassConfig()
        self.obs_dim = 2
        self.action_dim = 1
        self.action_low = -self.config.max_accel
        self.action_high = self.config.max_accel
        self.n_costs = 1
        self.horizon = self.config.horizon
        self._x = 0.0
        self._v = 0.0
        self._t = 0
        self._done = True

    def reset(self, seed: int) -> np.ndarray:
        # dynamics are deterministic; the seed is accepted for interface
        # symmetry and future stochastic variants
        self._x = 0.0
        self._v = 0.0
        self._t = 0
        self._done = False
        return np.array([self._x, self._v])

    def step(self, action) -> CmdpStep:
        if self._done:
            raise DomainError("episode finished; call reset first")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (1,):
            raise DomainError(f"action must have 1 component, got {a.shape}")
        cfg = self.config
        if abs(a[0]) > cfg.max_accel + 1e-12:
            raise DomainError(f"|action| must be <= {cfg.max_accel}, "
                              f"got {a[0]}")
        self._v = self._v + a[0] * cfg.dt
        self._x = self._x + self._v * cfg.dt
        self._t += 1
        reward = cfg.reward_scale * self._v
        cost = 1.0 if abs(self._v) > cfg.v_lim else 0.0
        truncated = self._t >= cfg.horizon
        self._done = truncated
        return CmdpStep(np.array([self._x, self._v]), reward,
                        np.array([cost]), False, truncated)


# -- construction from config dicts ----------------------------------------

ENV_KINDS = ("pondworld", "pointmass")


def make_env(spec: dict) -> CmdpEnv:
    """Build an environment from {"kind": ..., <config fields>}."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "pondworld":
        if "water" in spec:
            spec["water"] = frozenset(tuple(c) for c in spec["water"])
        for key in ("start", "goal"):
            if key in spec:
                spec[key] = tuple(spec[key])
        return PondWorld(PondWorldConfig(**spec))
    if kind == "pointmass":
        return PointMass(PointMassConfig(**spec))
    raise ParameterError(f"unknown env kind {kind!r}; expected one of "
                         f"{ENV_KINDS}")
