"""Personalized apprenticeship learning from heterogeneous demonstrators."""

__version__ = "0.1.0"
