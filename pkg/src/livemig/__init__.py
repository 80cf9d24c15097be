"""Deterministic simulator and protocol library for live migration of training jobs."""

__version__ = "0.1.0"
