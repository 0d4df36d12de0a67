"""Desk-scale continual learning with prompt pools, token merging, and
adaptive layer dropping, on a small float64 vision transformer."""

__version__ = "0.1.0"
