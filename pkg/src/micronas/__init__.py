"""Differentiable architecture search under microcontroller resource budgets."""

__version__ = "0.1.0"
