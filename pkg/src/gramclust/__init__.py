"""Unsupervised environment discovery from Gram-matrix style statistics."""

__version__ = "0.1.0"

# version of every JSON report layout; bumped on incompatible changes
SCHEMA_VERSION = 1
