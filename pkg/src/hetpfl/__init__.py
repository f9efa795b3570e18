"""Federated learning of local and global performance/fairness Pareto fronts."""

__version__ = "0.1.0"
