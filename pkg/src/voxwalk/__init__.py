"""Latent walk-jump sampling of voxelised molecules, in plain numpy."""

__version__ = "0.1.0"
