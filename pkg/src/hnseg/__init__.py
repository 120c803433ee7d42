"""Head-and-neck PET/CT tumor segmentation pipeline at desk scale."""

__version__ = "0.1.0"
