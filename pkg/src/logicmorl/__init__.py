"""Behavior specifications in propositional logic as goals for multi-objective DQN."""
from . import agent, gridworld, neural, oracle, speclang, trainer
from .config import RunConfig
from .errors import LogicMorlError

__all__ = ["agent", "gridworld", "neural", "oracle", "speclang", "trainer", "RunConfig",
           "LogicMorlError"]
__version__ = "0.1.0"
