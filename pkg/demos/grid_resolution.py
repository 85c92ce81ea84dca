"""
How big does a spherical grid have to be?
=========================================

Features of degree up to ``l_max`` are band-limited functions on the sphere.
Sampling them on a Gauss-Legendre x uniform grid and projecting back is
exact once the grid is large enough. Multiplying two such functions doubles
the bandwidth, so products need a bigger grid than roundtrips.
"""

import warnings

import numpy as np

from equicheck.irreps import IrrepsFeature, cg_tensor_product, gaunt_table
from equicheck.s2grid import (
    from_sphere,
    grid_tensor_product,
    make_grid,
    product_resolution,
    roundtrip_resolution,
    to_sphere,
)
from equicheck.harness.sweep import equivariance_sweep

rng = np.random.default_rng(0)
l_max = 4
x = IrrepsFeature(rng.standard_normal(((l_max + 1) ** 2, 4)), l_max)
y = IrrepsFeature(rng.standard_normal(((l_max + 1) ** 2, 4)), l_max)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


###############################################################################
# Roundtrip: sample, then project back.

print("smallest exact roundtrip grid:", roundtrip_resolution(l_max))
for r_theta in (4, 5, 6, 8):
    grid = make_grid(2 * l_max + 1, r_theta, l_max)
    back = from_sphere(to_sphere(x, grid), l_max)
    print(f"  grid {grid.shape}: roundtrip error {rel(back.data, x.data):.2e}")

###############################################################################
# Products: the grid product against the Gaunt-coefficient contraction.

table = gaunt_table(l_max)
oracle = cg_tensor_product(x, y, l_max, table).data
print("smallest exact product grid:", product_resolution(l_max))
for shape in [(9, 5), (11, 6), (13, 7), (16, 16)]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = grid_tensor_product(x, y, make_grid(*shape, l_max), l_max)
    print(f"  grid {shape}: product error {rel(out.data, oracle):.2e}")

###############################################################################
# Order truncation: keeping only |m| <= 2 shrinks the azimuthal axis.

print("attention grid at l_max=6, m_max=2:", product_resolution(6, 2), "vs full", product_resolution(6))

###############################################################################
# Equivariance of the activations. The SwiGLU-S2 product becomes exact at the
# product grid; the pointwise S2 nonlinearity is never band-limited, so its
# error only decays as the grid grows.

for op in ("swiglu_s2", "s2"):
    rep = equivariance_sweep(op, 2, None, [(6, 6), (8, 8), (12, 12), (24, 24)], trials=4)
    print(op.ljust(10), "  ".join(f"{r.r_phi}x{r.r_theta}:{r.error:.1e}" for r in rep.rows))
