"""Unrolled MRI reconstruction with flow-aligned training."""

__version__ = "0.1.0"
