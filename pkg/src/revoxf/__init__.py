"""revoxf: few-view voxel radiance fields with unreliability-aware training."""

__version__ = "0.1.0"
