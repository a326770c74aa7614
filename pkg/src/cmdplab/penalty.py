"""Barrier / penalty functions applied to the cost surrogate.

Pure scalar functions (numpy-broadcastable) with analytic gradients:

* ``ELU``: x for x >= 0, else alpha*(exp(x) - 1).  Gradient jumps by
  |1 - alpha| at 0 unless alpha = 1.
* ``CELU``: x for x >= 0, else alpha*(exp(x/alpha) - 1).  C1-continuous
  for every alpha, bounded below by -alpha, unit slope at the origin.
* ``CELU_CLAMPED``: max(CELU(x), -alpha*(1-h)); its gradient vanishes
  exactly once x <= alpha*log(h), the stagnation threshold.
* ``RELU_P3O``: max(x, 0), penalizing only after violation.
* ``LOG_BARRIER_IPO``: -log(-x)/t, defined only for x < 0; evaluating it
  on a violated constraint raises InfeasibleInputError.
* ``LEAKY_RELU``: x for x >= 0, else 0.01*x (fixed slope comparator that
  never stops rewarding constraint slack).

Gradients at x = 0 use the right-branch derivative (1 for the
ELU/CELU/ReLU family).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InfeasibleInputError, ParameterError

LEAKY_SLOPE = 0.01


class PenaltyKind(str, Enum):
    ELU = "elu"
    CELU = "celu"
    CELU_CLAMPED = "celu_clamped"
    RELU_P3O = "relu_p3o"
    LOG_BARRIER_IPO = "log_barrier_ipo"
    LEAKY_RELU = "leaky_relu"


@dataclass(frozen=True)
class PenaltyConfig:
    """Parameters shared by the penalty family.

    alpha > 0 sets the stagnation depth (-alpha) of the exponential-linear
    kinds; h in (0, min(alpha, 1)) the clamp level of CELU_CLAMPED; eta > 0
    the penalty factor multiplying the barrier in the combined loss; t > 0
    the sharpness of the log-barrier comparator.
    """

    alpha: float = 0.5
    h: float | None = None
    eta: float = 20.0
    t: float = 20.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if not self.eta > 0:
            raise ParameterError(f"eta must be > 0, got {self.eta}")
        if not self.t > 0:
            raise ParameterError(f"t must be > 0, got {self.t}")
        if self.h is not None and not 0 < self.h < min(self.alpha, 1.0):
            raise ParameterError(
                f"h must lie in (0, min(alpha, 1)) = "
                f"(0, {min(self.alpha, 1.0)}), got {self.h}")


def _require_h(cfg: PenaltyConfig) -> float:
    if cfg.h is None:
        raise ParameterError("this penalty kind requires the clamp "
                             "parameter h to be set")
    return cfg.h


def _celu_neg(x, alpha):
    return alpha * np.expm1(np.asarray(x, dtype=np.float64) / alpha)


def penalty_value(kind: PenaltyKind, x, cfg: PenaltyConfig):
    """Value of the chosen barrier at x (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    if kind == PenaltyKind.ELU:
        out = np.where(x >= 0, x, cfg.alpha * np.expm1(np.minimum(x, 0.0)))
    elif kind == PenaltyKind.CELU:
        out = np.where(x >= 0, x, _celu_neg(np.minimum(x, 0.0), cfg.alpha))
    elif kind == PenaltyKind.CELU_CLAMPED:
        h = _require_h(cfg)
        raw = np.where(x >= 0, x, _celu_neg(np.minimum(x, 0.0), cfg.alpha))
        out = np.maximum(raw, -cfg.alpha * (1.0 - h))
    elif kind == PenaltyKind.RELU_P3O:
        out = np.maximum(x, 0.0)
    elif kind == PenaltyKind.LOG_BARRIER_IPO:
        if np.any(x >= 0):
            raise InfeasibleInputError(
                "log barrier is undefined for x >= 0 (violated constraint)")
        out = -np.log(-x) / cfg.t
    elif kind == PenaltyKind.LEAKY_RELU:
        out = np.where(x >= 0, x, LEAKY_SLOPE * x)
    else:
        raise ParameterError(f"unknown penalty kind {kind!r}")
    return out if out.ndim else float(out)


def penalty_grad(kind: PenaltyKind, x, cfg: PenaltyConfig):
    """Analytic derivative of penalty_value; right-branch value at x = 0."""
    x = np.asarray(x, dtype=np.float64)
    if kind == PenaltyKind.ELU:
        out = np.where(x >= 0, 1.0, cfg.alpha * np.exp(np.minimum(x, 0.0)))
    elif kind == PenaltyKind.CELU:
        out = np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0) / cfg.alpha))
    elif kind == PenaltyKind.CELU_CLAMPED:
        h = _require_h(cfg)
        grad = np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0) / cfg.alpha))
        out = np.where(x <= stagnation_threshold(cfg), 0.0, grad)
    elif kind == PenaltyKind.RELU_P3O:
        out = np.where(x >= 0, 1.0, 0.0)
    elif kind == PenaltyKind.LOG_BARRIER_IPO:
        if np.any(x >= 0):
            raise InfeasibleInputError(
                "log barrier is undefined for x >= 0 (violated constraint)")
        out = -1.0 / (cfg.t * x)
    elif kind == PenaltyKind.LEAKY_RELU:
        out = np.where(x >= 0, 1.0, LEAKY_SLOPE)
    else:
        raise ParameterError(f"unknown penalty kind {kind!r}")
    return out if out.ndim else float(out)


def stagnation_threshold(cfg: PenaltyConfig) -> float:
    """Cost-loss value below which the clamped CELU gradient is exactly 0.

    Solving alpha*(exp(x/alpha) - 1) = -alpha*(1-h) gives x = alpha*log(h).
    """
    h = _require_h(cfg)
    if not 0 < h < cfg.alpha:
        raise ParameterError(f"need 0 < h < alpha, got h={h}, "
                             f"alpha={cfg.alpha}")
    return cfg.alpha * np.log(h)
