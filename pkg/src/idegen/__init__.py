"""Intention-driven ego-to-exo video generation at desk scale."""

__version__ = "0.1.0"
