"""Temporal/spectral selective state-space model for audio-based drone
trajectory estimation and classification, on a from-scratch autodiff engine."""

__version__ = "0.1.0"
