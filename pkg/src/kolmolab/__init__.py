"""Numerical laboratory for Gaussian heat-kernel bounds of divergence-form
operators ``-div(a grad) + b . grad`` with form-bounded drifts."""

__version__ = "0.1.0"
