"""Prior-guided volumetric screening for Parkinson's disease."""

__version__ = "0.1.0"
