"""Hierarchy-aware active learning for point cloud segmentation."""

__version__ = "0.1.0"
