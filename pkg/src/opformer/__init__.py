"""Transformer neural operators for neuron models and Riemann problems."""

__version__ = "0.1.0"
