"""Offline tooling: pretraining, gradient oracle, diagnostics, experiments, CLI."""
