"""Micro-benchmarks: fused permutation and tensor-product scaling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..irreps import IrrepsFeature, gaunt_table, num_coefficients, cg_tensor_product, random_rotation
from ..layers import SO2Weights, fuse_permutation, permutation_counter, so2_linear, so2_linear_fused
from ..s2grid import grid_tensor_product, make_grid, product_resolution

WARMUPS = 2
MIN_REPETITIONS = 9


def median_time(fn: Callable[[], object], repetitions: int = MIN_REPETITIONS, warmups: int = WARMUPS) -> float:
    """Median wall time of ``fn`` in seconds on the monotonic clock."""
    for _ in range(warmups):
        fn()
    times = []
    for _ in range(max(repetitions, 1)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# --------------------------------------------------------------------------
# fused permutation


@dataclass
class FusedBenchResult:
    l_max: int
    m_max: int
    n_edges: int
    channels: int
    equal: bool
    permutations_fused: int
    permutations_unfused: int
    t_fused: float
    t_unfused: float

    @property
    def ratio(self) -> float:
        return self.t_unfused / self.t_fused

    def summary(self) -> dict:
        return {
            "l_max": self.l_max,
            "m_max": self.m_max,
            "n_edges": self.n_edges,
            "channels": self.channels,
            "equal": self.equal,
            "permutations_fused": self.permutations_fused,
            "permutations_unfused": self.permutations_unfused,
        }

    def timings(self) -> dict:
        return {"t_fused": self.t_fused, "t_unfused": self.t_unfused, "speedup": self.ratio}


def _fused_inputs(l_max, m_max, n_edges, channels, seed):
    rng = np.random.default_rng(seed)
    rot = fuse_permutation(random_rotation(seed, l_max, size=n_edges), m_max)
    x = rng.standard_normal((n_edges, num_coefficients(l_max), channels)).astype(np.float32)
    w = SO2Weights.init(rng, l_max, l_max, m_max, channels, channels)
    dense = rot.dense(np.float32)
    dense_t = np.ascontiguousarray(np.swapaxes(dense, -1, -2))
    perm = np.ascontiguousarray(rot.permuted.astype(np.float32))
    perm_t = np.ascontiguousarray(np.swapaxes(perm, -1, -2))
    return x, w, dense, dense_t, perm, perm_t


def rotate_so2_unfused(x, w, dense, dense_t, l_max):
    """Rotate, reorder into the SO(2) layout, mix, reorder back, rotate back."""
    y, _ = so2_linear(IrrepsFeature(dense @ x, l_max), w)
    return dense_t @ y.data


def rotate_so2_fused(x, w, perm, perm_t):
    """Same map with the reordering folded into the rotation matrices."""
    yo, _ = so2_linear_fused(perm @ x, w)
    return perm_t @ yo


def bench_fused(
    l_max: int = 4, m_max: int = 2, n_edges: int = 10_000, repetitions: int = MIN_REPETITIONS,
    channels: int = 8, seed: int = 0,
) -> FusedBenchResult:
    """Compare the fused and unfused edge pipelines for equality, permutation count and time."""
    x, w, dense, dense_t, perm, perm_t = _fused_inputs(l_max, m_max, n_edges, channels, seed)
    c0 = permutation_counter["count"]
    out_u = rotate_so2_unfused(x, w, dense, dense_t, l_max)
    c1 = permutation_counter["count"]
    out_f = rotate_so2_fused(x, w, perm, perm_t)
    c2 = permutation_counter["count"]
    equal = bool(np.array_equal(out_u, out_f))
    t_u = median_time(lambda: rotate_so2_unfused(x, w, dense, dense_t, l_max), repetitions)
    t_f = median_time(lambda: rotate_so2_fused(x, w, perm, perm_t), repetitions)
    return FusedBenchResult(l_max, m_max, n_edges, channels, equal, c2 - c1, c1 - c0, t_f, t_u)


# --------------------------------------------------------------------------
# tensor-product scaling


@dataclass
class ScalingReport:
    l_max: list
    t_cg: list
    t_grid: list
    agreement: list
    channels: int
    slope_cg: float = field(init=False)
    slope_grid: float = field(init=False)

    def __post_init__(self):
        self.slope_cg = loglog_slope(self.l_max, self.t_cg)
        self.slope_grid = loglog_slope(self.l_max, self.t_grid)

    def rows(self) -> list[dict]:
        return [
            {"l_max": l, "t_cg": a, "t_grid": b, "relative_difference": d}
            for l, a, b, d in zip(self.l_max, self.t_cg, self.t_grid, self.agreement)
        ]


def bench_tp(
    l_max_list: Sequence[int] = (2, 4, 8, 16), repetitions: int = MIN_REPETITIONS,
    channels: int = 256, seed: int = 0,
) -> ScalingReport:
    """Time the dense coupling-table product against the grid product.

    Both products couple two ``channels``-wide features of degree ``l`` into
    degree ``l`` on the smallest exact grid. The coupling path contracts the
    full Gaunt table, O(l^6) per channel; the grid path costs O(l^4).
    """
    if len(l_max_list) < 3:
        raise ValueError("need at least three degrees to fit a slope")
    rng = np.random.default_rng(seed)
    t_cg, t_grid, agree = [], [], []
    for l in l_max_list:
        K = num_coefficients(l)
        f = IrrepsFeature(rng.standard_normal((K, channels)).astype(np.float32), l)
        g = IrrepsFeature(rng.standard_normal((K, channels)).astype(np.float32), l)
        table = gaunt_table(l)
        table.dense(l, l, l, np.float32)
        grid = make_grid(*product_resolution(l), l)
        grid.to_matrix(l, np.float32)
        grid.from_matrix(l, np.float32)
        a = cg_tensor_product(f, g, l, table).data
        b = grid_tensor_product(f, g, grid, l).data
        agree.append(float(np.linalg.norm(a - b) / np.linalg.norm(a)))
        t_cg.append(median_time(lambda: cg_tensor_product(f, g, l, table), repetitions))
        t_grid.append(median_time(lambda: grid_tensor_product(f, g, grid, l), repetitions))
    return ScalingReport(list(l_max_list), t_cg, t_grid, agree, channels)
