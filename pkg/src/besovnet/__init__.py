"""Constructive ReLU ConvResNet approximation of functions on low-dimensional manifolds."""

__version__ = "0.1.0"
