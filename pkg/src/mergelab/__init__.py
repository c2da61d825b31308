"""Task-vector merging of per-domain sequential recommenders."""

__version__ = "0.1.0"
