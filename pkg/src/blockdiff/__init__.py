"""Desk-scale lab for block-wise discrete diffusion language model training."""

__version__ = "0.1.0"
