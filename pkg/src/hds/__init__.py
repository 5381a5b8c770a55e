"""Amortised variational inference for hierarchical nonlinear ODE systems."""

__version__ = "0.1.0"
