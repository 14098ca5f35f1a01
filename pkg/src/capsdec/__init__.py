"""Capsule-network features for reconstructing digit stimuli from voxel responses."""

__version__ = "0.1.0"
