"""Image-conditioned instance prompts and bilateral fusion for referring segmentation, in numpy."""

__version__ = "0.1.0"
