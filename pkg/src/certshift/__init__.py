"""certshift: empirical and certified robustness under domain shift, desk scale."""

__version__ = "0.1.0"
