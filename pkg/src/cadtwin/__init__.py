"""Articulated vehicle asset reconstruction from multi-view images and LiDAR."""

__version__ = "0.1.0"
