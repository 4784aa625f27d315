"""Desk-scale two-hand mesh recovery pipeline.

Relation-aware tokenization of paired hand crops, spatio-temporal fusion,
a procedural parametric hand model, synthetic sequence generation, training
losses, and pose-estimation metrics.
"""

__version__ = "0.1.0"
