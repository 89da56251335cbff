"""Exponential-sum kernel fitting: closed-form losses, flow dynamics, landscape census."""

__version__ = "0.1.0"

from . import approx, dynamics, expsum, kernels, landscape, numerics, rnnsim

__all__ = ["approx", "dynamics", "expsum", "kernels", "landscape", "numerics", "rnnsim"]
