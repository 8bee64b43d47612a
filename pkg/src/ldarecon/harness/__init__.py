"""Metrics, data, experiment orchestration and the command line interface."""
