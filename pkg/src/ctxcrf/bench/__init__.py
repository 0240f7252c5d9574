"""Synthetic benchmark, metrics, persistence and the command-line interface."""
