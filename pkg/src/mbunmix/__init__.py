"""Multi-branch CNN hyperspectral unmixing with a small built-in autodiff engine."""

__version__ = "0.1.0"
