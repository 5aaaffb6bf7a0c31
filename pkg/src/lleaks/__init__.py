"""Membership-inference attack lab built on logit-distilled shadow models."""

from . import attack, data, losses, models, nncore  # noqa: F401  (wires the arch registry)

__version__ = "0.1.0"
