"""weightlab: weight-distribution forensics for neural-network checkpoints."""

__version__ = "0.1.0"
