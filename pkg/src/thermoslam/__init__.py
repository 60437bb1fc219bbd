"""Thermal-visible-LiDAR fusion pipeline with a deterministic sensor simulator."""

__version__ = "0.1.0"
