"""Weakly-supervised temporal action localization on synthetic feature benchmarks."""

__version__ = "0.1.0"
