"""Semi-supervised single-view voxel reconstruction with prototype shape priors."""

__version__ = "0.1.0"
