"""Equivariant graph-attention building blocks on spherical grids, with checks."""

from .irreps import IrrepsError, IrrepsFeature, cg_table, gaunt_table, random_rotation, rotate_feature, wigner_d
from .model import ModelConfig, ParseError, build_graph, forward, init_weights
from .s2grid import GridSpec, from_sphere, make_grid, to_sphere

__version__ = "0.1.0"
