"""Synthesis of 3D cell and cell-cluster models from constrained feature vectors."""

__version__ = "0.1.0"
