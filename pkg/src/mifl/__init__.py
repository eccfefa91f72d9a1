"""Federated-learning fairness benchmark with mutual-information losses."""

__version__ = "0.1.0"
