"""Differentiable N-DoF motion planning inside a first-order robot program optimizer."""

__version__ = "0.1.0"
