"""Shape-prior unsupervised domain adaptation for 3D segmentation, in numpy."""

__version__ = "0.1.0"
