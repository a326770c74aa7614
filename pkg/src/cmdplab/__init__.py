"""Constrained-RL laboratory: incrementally penalized proximal policy
optimization (IP3O) with comparator algorithms, desk-scale CMDP
environments, and an exact tabular oracle."""

from . import cli, diffcore, envs, oracle, penalty, rollout, trainer
from .errors import CmdpLabError

__version__ = "0.1.0"

__all__ = ["cli", "diffcore", "envs", "oracle", "penalty", "rollout",
           "trainer", "CmdpLabError", "__version__"]
