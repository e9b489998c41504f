"""Feedback capacity of additive Gaussian noise channels with state-space noise."""

__version__ = "0.1.0"
