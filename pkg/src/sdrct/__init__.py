"""Parallel-beam CT reconstruction with double (within- and between-slice) regularisation."""

from .core import GridGeometry, ReconConfig, SinogramStack, Volume

__version__ = "0.1.0"

__all__ = ["GridGeometry", "ReconConfig", "SinogramStack", "Volume", "__version__"]
