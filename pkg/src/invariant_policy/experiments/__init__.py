"""Simulation harness and tabular pipeline."""
