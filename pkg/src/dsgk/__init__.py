"""Domain adaptation with spherical Gaussian-kernel geodesic losses, in numpy."""

__version__ = "0.1.0"
