"""Semi-supervised video object segmentation with pixel- and object-level correspondence losses."""

__version__ = "0.1.0"
