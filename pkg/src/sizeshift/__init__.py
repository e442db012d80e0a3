"""Graph classification toolkit with coarsening-based size-shift regularization."""

__version__ = "0.1.0"
