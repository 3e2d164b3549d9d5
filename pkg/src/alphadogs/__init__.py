"""Delaunay-based optimization of time-averaged statistics."""
