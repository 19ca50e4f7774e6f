"""Static-scene Gaussian splatting with moving-object masking and depth propagation."""

__version__ = "0.1.0"
