"""Bezier shape self-modelling and Jacobian control for a simulated continuum robot."""

__version__ = "0.1.0"
