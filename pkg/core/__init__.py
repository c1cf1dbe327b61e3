"""Numerical library behind the geomort pipeline."""
