"""Center-manifold-based identification of polynomial nonlinear systems."""

__version__ = "0.1.0"
