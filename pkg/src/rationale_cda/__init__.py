"""Counterfactual data augmentation for MMI rationale models."""

__version__ = "0.1.0"
