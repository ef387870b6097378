"""Multi-agent safety-critical driving simulation and residual-fusion safe RL."""

from saferes import harness, learner, policy, rewards, risk, world

__all__ = ["world", "risk", "rewards", "policy", "learner", "harness"]
__version__ = "0.1.0"
