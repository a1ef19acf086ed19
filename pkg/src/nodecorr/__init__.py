"""Correlation learning over point-cloud node matrices."""
