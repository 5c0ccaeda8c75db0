"""Hybrid-precision post-training quantization and simulated inference for SR CNNs."""

__version__ = "0.1.0"
