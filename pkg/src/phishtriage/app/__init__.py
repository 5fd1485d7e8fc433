"""Orchestration layer: configuration, end-to-end pipeline, reports, simulations and synthetic data."""
