"""Incompressible flows for permutations of grid cubes."""
from .grid import INF, GridGraph, Permutation, manhattan_dist, displacement_norm

__version__ = "0.1.0"
