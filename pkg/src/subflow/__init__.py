"""Policy-based GFlowNet training with subtrajectory evaluation balance."""

__version__ = "0.1.0"
