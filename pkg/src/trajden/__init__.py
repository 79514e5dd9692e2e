"""Map-conditioned GPS trajectory denoising on procedurally generated worlds."""

__version__ = "0.1.0"
