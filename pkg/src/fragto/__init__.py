"""Topology optimization with coarse FEM and a learned coarse-to-fine field lift."""

__version__ = "0.1.0"
