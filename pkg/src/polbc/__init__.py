"""Behavioural characterization of policies from the states they visit."""

__version__ = "0.1.0"
