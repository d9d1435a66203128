"""Temporal-channel attention spoof detector: tensor engine, model,
synthetic corpus, training protocol and scoring."""

__version__ = "0.1.0"
