"""Model-based RL under hidden confounding with proximal reward identification."""

__version__ = "0.1.0"
