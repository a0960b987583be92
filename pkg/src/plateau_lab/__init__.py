"""PPO / PPO-EWMA training stack instrumented for outer-loop step-size studies."""

__version__ = "0.1.0"
