"""Label-free fine-grained segmentation of dense point clouds."""

__version__ = "0.1.0"
