"""Desk-scale data-free knowledge distillation from a shifted, unlabeled pool."""

__version__ = "0.1.0"
