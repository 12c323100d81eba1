"""hp Galerkin boundary elements for the electric field integral equation."""

__version__ = "0.1.0"
