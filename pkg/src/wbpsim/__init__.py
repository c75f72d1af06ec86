"""Deterministic simulator of a hierarchical dataflow manycore for
wireless baseband processing."""

__version__ = "0.1.0"
