"""Attentive grouping for deep metric learning on a from-scratch numpy autodiff engine."""

__version__ = "0.1.0"
