"""Point-set object representation and a two-stage anchor-free detector."""

__version__ = "0.1.0"
