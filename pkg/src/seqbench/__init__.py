"""Benchmark harness for recurrent clinical-event classifiers on visit sequences."""

__version__ = "0.1.0"
