"""Bayesian additive regression trees for mediation analysis of survival outcomes."""

__version__ = "0.1.0"
