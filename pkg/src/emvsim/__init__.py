"""Ring-road traffic with an emergency vehicle: simulator, risk model,
MAPPO training, and rule-based baselines."""

__version__ = "0.1.0"
