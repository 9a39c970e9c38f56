"""Geometry-aided matching for visual localization."""
