"""Counterfactual-budgeting offline RL on finite MDPs: exact DP, oracles, fitted training and inference."""

__version__ = "0.1.0"
