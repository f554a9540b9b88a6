"""Categorical co-frequency analysis (CoFA) and the modeling pipeline used to
validate the resulting level clusters."""

__version__ = "0.1.0"
