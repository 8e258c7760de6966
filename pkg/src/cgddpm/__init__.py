"""Cycle-guided conditional diffusion for paired 3D volume translation."""

__version__ = "0.1.0"
