"""Martingale embeddings via stochastic localization and quantitative CLT checks."""

__version__ = "0.1.0"
