"""Sequential fully convolutional crop/weed segmentation on image sequences."""
__version__ = "0.1.0"
