"""Sampling on the sphere: Gauss-Legendre x uniform-longitude grids, ToSphere/FromSphere
and the grid tensor product.

A grid integrates the product of three band-limited harmonics exactly when its
colatitude rule has enough Gauss nodes and its longitude rule cannot alias the
largest order frequency in the integrand. With inputs and outputs truncated to
``|m| <= m_max`` the longitude requirement only depends on ``m_max``; that is
what makes narrow attention grids such as (8, 20) exact at l_max = 6, m_max = 2.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .irreps import IrrepsError, IrrepsFeature, num_coefficients, spherical_harmonics


class ResolutionWarning(UserWarning):
    """The grid is too coarse for an exact result; equivariance may be broken."""


def order_of_index(l_max: int) -> np.ndarray:
    """Order ``m`` of every flat coefficient index."""
    return np.concatenate([np.arange(-L, L + 1) for L in range(l_max + 1)])


def degree_of_index(l_max: int) -> np.ndarray:
    return np.concatenate([np.full(2 * L + 1, L) for L in range(l_max + 1)])


def effective_order(l_max: int, m_max: Optional[int]) -> int:
    return l_max if m_max is None else min(m_max, l_max)


def roundtrip_resolution(l_max: int, m_max: Optional[int] = None) -> tuple[int, int]:
    """Minimal ``(r_phi, r_theta)`` for which FromSphere inverts ToSphere."""
    return 2 * effective_order(l_max, m_max) + 1, l_max + 1


def product_resolution(l_max: int, m_max: Optional[int] = None) -> tuple[int, int]:
    """Minimal ``(r_phi, r_theta)`` for an exact degree-``l_max`` grid product."""
    return 3 * effective_order(l_max, m_max) + 1, -(-(3 * l_max + 1) // 2)


@dataclass(frozen=True)
class GridSpec:
    r_phi: int
    r_theta: int
    l_max: int
    m_max: Optional[int] = None

    def __post_init__(self):
        if self.r_phi < 1 or self.r_theta < 1:
            raise ValueError(f"grid needs at least one node per axis, got ({self.r_phi}, {self.r_theta})")
        if self.m_max is not None and self.m_max < 0:
            raise ValueError("m_max must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.r_phi, self.r_theta)

    @property
    def num_points(self) -> int:
        return self.r_phi * self.r_theta

    @functools.cached_property
    def _nodes(self):
        z, wz = np.polynomial.legendre.leggauss(self.r_theta)
        theta = np.arccos(z)
        phi = 2 * np.pi * np.arange(self.r_phi) / self.r_phi
        w = np.outer(np.full(self.r_phi, 2 * np.pi / self.r_phi), wz)
        return phi, theta, w

    @property
    def phi(self) -> np.ndarray:
        return self._nodes[0]

    @property
    def theta(self) -> np.ndarray:
        return self._nodes[1]

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights, shape (r_phi, r_theta), summing to 4 pi."""
        return self._nodes[2]

    @functools.cached_property
    def directions(self) -> np.ndarray:
        phi, theta, _ = self._nodes
        st, ct = np.sin(theta), np.cos(theta)
        return np.stack(
            [
                np.outer(np.cos(phi), st),
                np.outer(np.sin(phi), st),
                np.broadcast_to(ct, (self.r_phi, self.r_theta)),
            ],
            -1,
        )

    @functools.cached_property
    def sh(self) -> np.ndarray:
        """Harmonics at every node, shape (r_phi * r_theta, (l_max+1)**2), float64."""
        return spherical_harmonics(self.directions.reshape(-1, 3), self.l_max)

    def kept(self, l_max: int) -> np.ndarray:
        """Flat coefficient indices that survive the order truncation."""
        if l_max > self.l_max:
            raise IrrepsError(f"grid caches harmonics up to {self.l_max}, requested {l_max}")
        idx = np.arange(num_coefficients(l_max))
        if self.m_max is None:
            return idx
        return idx[np.abs(order_of_index(l_max)) <= self.m_max]

    @functools.lru_cache(maxsize=32)
    def to_matrix(self, l_max: int, dtype=np.float32, index: Optional[tuple] = None) -> np.ndarray:
        """Synthesis matrix (N, K') for the coefficient rows ``index`` (default: kept rows)."""
        idx = self.kept(l_max) if index is None else np.asarray(index)
        return np.ascontiguousarray(self.sh[:, idx].astype(dtype))

    @functools.lru_cache(maxsize=32)
    def from_matrix(self, l_max: int, dtype=np.float32, index: Optional[tuple] = None) -> np.ndarray:
        """Analysis matrix (K', N) for the coefficient rows ``index`` (default: kept rows)."""
        idx = self.kept(l_max) if index is None else np.asarray(index)
        w = self.weights.reshape(-1, 1)
        return np.ascontiguousarray((self.sh[:, idx] * w).T.astype(dtype))

    def is_exact_roundtrip(self, l_max: int) -> bool:
        need_phi, need_theta = roundtrip_resolution(l_max, self.m_max)
        return self.r_phi >= need_phi and self.r_theta >= need_theta

    def is_exact_product(self, l_max: int) -> bool:
        need_phi, need_theta = product_resolution(l_max, self.m_max)
        return self.r_phi >= need_phi and self.r_theta >= need_theta

    def __hash__(self):
        return hash((self.r_phi, self.r_theta, self.l_max, self.m_max))

    def __eq__(self, other):
        return isinstance(other, GridSpec) and (
            (self.r_phi, self.r_theta, self.l_max, self.m_max)
            == (other.r_phi, other.r_theta, other.l_max, other.m_max)
        )


@functools.lru_cache(maxsize=64)
def make_grid(r_phi: int, r_theta: int, l_max: int, m_max: Optional[int] = None) -> GridSpec:
    """Build (and cache) a grid with harmonics precomputed up to ``l_max``."""
    grid = GridSpec(int(r_phi), int(r_theta), int(l_max), m_max)
    grid.sh  # populate the cache eagerly
    return grid


@dataclass(frozen=True)
class GridFeature:
    """Signals on a grid, shape (..., r_phi, r_theta, channels)."""

    data: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim < 3 or data.shape[-3:-1] != self.spec.shape:
            raise IrrepsError(f"grid data shape {data.shape} does not match grid {self.spec.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def with_data(self, data) -> "GridFeature":
        return GridFeature(data, self.spec)


def to_sphere(x: IrrepsFeature, grid: GridSpec) -> GridFeature:
    """Evaluate ``sum_{L,m} Y_Lm(node) x_Lm`` at every grid node, per channel."""
    if x.l_max > grid.l_max:
        raise IrrepsError(f"feature l_max={x.l_max} exceeds grid cache l_max={grid.l_max}")
    mat = grid.to_matrix(x.l_max, x.data.dtype)
    kept = grid.kept(x.l_max)
    src = x.data if len(kept) == x.data.shape[-2] else x.data[..., kept, :]
    out = mat @ src
    return GridFeature(out.reshape(*out.shape[:-2], grid.r_phi, grid.r_theta, out.shape[-1]), grid)


def from_sphere(g: GridFeature, l_max: int) -> IrrepsFeature:
    """Quadrature projection onto every ``Y_Lm`` with ``L <= l_max``."""
    grid = g.spec
    if l_max > grid.l_max:
        raise IrrepsError(f"requested l_max={l_max} exceeds grid cache l_max={grid.l_max}")
    mat = grid.from_matrix(l_max, g.data.dtype)
    flat = g.data.reshape(*g.data.shape[:-3], grid.num_points, g.data.shape[-1])
    coeffs = mat @ flat
    kept = grid.kept(l_max)
    if len(kept) == num_coefficients(l_max):
        return IrrepsFeature(coeffs, l_max)
    out = np.zeros((*coeffs.shape[:-2], num_coefficients(l_max), coeffs.shape[-1]), coeffs.dtype)
    out[..., kept, :] = coeffs
    return IrrepsFeature(out, l_max)


def grid_tensor_product(
    x: IrrepsFeature, y: IrrepsFeature, grid: GridSpec, l_out: int
) -> IrrepsFeature:
    """Pointwise product on the grid projected back to degree ``l_out``.

    Runs on any grid; when the grid cannot integrate the product exactly a
    :class:`ResolutionWarning` is emitted and ``result.meta['under_resolved']``
    is set.
    """
    l_in = max(x.l_max, y.l_max, l_out)
    under = not grid.is_exact_product(l_in)
    if under:
        need = product_resolution(l_in, grid.m_max)
        warnings.warn(
            f"grid {grid.shape} below exact product resolution {need} for l={l_in}",
            ResolutionWarning,
            stacklevel=2,
        )
    z = to_sphere(x, grid).data * to_sphere(y, grid).data
    out = from_sphere(GridFeature(z, grid), l_out)
    return IrrepsFeature(out.data, l_out, meta={"under_resolved": under})


def grid_reduction(grid: tuple[int, int], baseline: tuple[int, int]) -> float:
    """Fractional reduction in node count of ``grid`` relative to ``baseline``."""
    return 1.0 - math.prod(grid) / math.prod(baseline)
