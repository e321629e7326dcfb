"""Synthetic continual-unlearning benchmark: data, metrics, orchestration, CLI."""
