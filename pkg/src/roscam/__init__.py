"""Camera pose, focal and outlier-uncertainty estimation from point tracks."""

__version__ = "0.1.0"
