"""Mixed Dirichlet-Neumann boundary-element solver."""

__version__ = "1.0.0"
