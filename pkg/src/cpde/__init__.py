"""Contact process with dynamic edges: simulation and verification toolkit."""

__version__ = "0.1.0"
