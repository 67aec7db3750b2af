"""Camera pose regression with a self-supervised colorization auxiliary task."""

__version__ = "0.1.0"
