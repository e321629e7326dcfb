"""Continual unlearning with an orthogonal LoRA and per-request OOD gating.

Desk-scale implementation: a tiny causal transformer is unlearned request by
request through one shared low-rank adapter, and at inference the adapter is
blended in with a weight derived from per-request out-of-distribution
detectors.
"""

__version__ = "0.1.0"
