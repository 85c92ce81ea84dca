"""Activations, equivariant layer norms, SO(2) linear layers and the cutoff envelope."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .irreps import (
    IrrepsError,
    IrrepsFeature,
    RotationBundle,
    degree_slice,
    num_coefficients,
)
from .s2grid import GridFeature, GridSpec, degree_of_index, from_sphere, order_of_index, to_sphere

NORM_FLOOR = 1e-12
LEAKY_SLOPE = 0.1


def silu(x):
    return x * expit(x)


def sigmoid(x):
    return expit(x)


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return np.where(x >= 0, x, slope * x)


def envelope(r, r_cut: float, p: int = 5):
    """Polynomial cutoff with value, slope and curvature all vanishing at ``r_cut``.

    ``u(d) = 1 - (p+1)(p+2)/2 d^p + p(p+2) d^(p+1) - p(p+1)/2 d^(p+2)`` for
    ``d = r / r_cut < 1`` and zero beyond.
    """
    d = np.asarray(r, dtype=np.float64) / r_cut
    u = (
        1.0
        - (p + 1) * (p + 2) / 2 * d**p
        + p * (p + 2) * d ** (p + 1)
        - p * (p + 1) / 2 * d ** (p + 2)
    )
    return np.where(d < 1.0, u, 0.0)


# --------------------------------------------------------------------------
# activations


def _gate(data: np.ndarray, gates: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    # degrees[k] is the degree of row k; gates has shape (..., l_max, C)
    out = np.empty_like(data)
    scalar = degrees == 0
    out[..., scalar, :] = silu(data[..., scalar, :])
    rest = ~scalar
    if np.any(rest):
        g = sigmoid(gates)[..., degrees[rest] - 1, :]
        out[..., rest, :] = data[..., rest, :] * g
    return out


def gate_activation(x: IrrepsFeature, gate_scalars) -> IrrepsFeature:
    """SiLU on degree 0, ``sigmoid(gate)``-scaled identity on every other degree.

    ``gate_scalars`` has shape (..., l_max, channels): one gate per
    non-scalar degree and channel.
    """
    gates = np.asarray(gate_scalars)
    if gates.shape[-2:] != (x.l_max, x.channels):
        raise IrrepsError(
            f"expected gate scalars of shape (..., {x.l_max}, {x.channels}), got {gates.shape}"
        )
    return x.with_data(_gate(x.data, gates.astype(x.data.dtype), degree_of_index(x.l_max)))


def s2_activation(x: IrrepsFeature, grid: GridSpec) -> IrrepsFeature:
    g = to_sphere(x, grid)
    return from_sphere(g.with_data(silu(g.data)), x.l_max)


def swiglu_s2(x_scalar, x1: GridFeature, x2: GridFeature) -> GridFeature:
    """``sigmoid(x_scalar) * x1 * x2`` with the gate broadcast over grid nodes."""
    if x1.spec != x2.spec:
        raise IrrepsError("SwiGLU-S2 operands live on different grids")
    if x1.data.shape != x2.data.shape:
        raise IrrepsError(f"grid shapes differ: {x1.data.shape} vs {x2.data.shape}")
    s = np.asarray(x_scalar)
    if s.shape[-1] != x1.channels:
        raise IrrepsError(f"gate has {s.shape[-1]} channels, grids have {x1.channels}")
    gate = sigmoid(s).astype(x1.data.dtype)[..., None, None, :]
    return x1.with_data(gate * x1.data * x2.data)


# --------------------------------------------------------------------------
# layer norms


@dataclass(frozen=True)
class NormParams:
    gamma: np.ndarray  # (l_max + 1, C)
    beta: np.ndarray  # (C,)

    @classmethod
    def identity(cls, l_max: int, channels: int, dtype=np.float32) -> "NormParams":
        return cls(np.ones((l_max + 1, channels), dtype), np.zeros(channels, dtype))


def _degree_rms(x: IrrepsFeature) -> tuple[np.ndarray, np.ndarray]:
    """Scalar mean and per-degree RMS values, shapes (..., 1) and (..., l_max+1)."""
    s = x.data[..., 0, :]
    mu = s.mean(-1, keepdims=True)
    var = [((s - mu) ** 2).mean(-1)]
    for L in range(1, x.l_max + 1):
        var.append((x.degree(L) ** 2).mean((-2, -1)))
    return mu, np.stack(var, -1)


def _apply_norm(x: IrrepsFeature, params: NormParams, mu, sigma_per_degree) -> IrrepsFeature:
    # sigma_per_degree: (..., l_max+1) divisor used for each degree
    sig = np.maximum(sigma_per_degree, NORM_FLOOR).astype(x.data.dtype)
    gamma = np.asarray(params.gamma, x.data.dtype)
    out = np.empty_like(x.data)
    out[..., 0, :] = gamma[0] * (x.data[..., 0, :] - mu) / sig[..., 0:1] + params.beta
    for L in range(1, x.l_max + 1):
        s = degree_slice(L)
        out[..., s, :] = gamma[L] * x.data[..., s, :] / sig[..., L, None, None]
    return x.with_data(out)


def merged_layer_norm(x: IrrepsFeature, params: NormParams) -> IrrepsFeature:
    """Normalise every degree by one RMS merged over all degrees."""
    mu, var = _degree_rms(x)
    sigma = np.sqrt(var.mean(-1, keepdims=True))
    return _apply_norm(x, params, mu, np.broadcast_to(sigma, var.shape))


def separable_layer_norm(x: IrrepsFeature, params: NormParams) -> IrrepsFeature:
    mu, var = _degree_rms(x)
    sig = np.empty_like(var)
    sig[..., 0] = np.sqrt(var[..., 0])
    if x.l_max > 0:
        sig[..., 1:] = np.sqrt(var[..., 1:].mean(-1, keepdims=True))
    return _apply_norm(x, params, mu, sig)


def degreewise_layer_norm(x: IrrepsFeature, params: NormParams) -> IrrepsFeature:
    mu, var = _degree_rms(x)
    return _apply_norm(x, params, mu, np.sqrt(var))


LAYER_NORMS = {
    "merged": merged_layer_norm,
    "separable": separable_layer_norm,
    "degreewise": degreewise_layer_norm,
}


def scalar_layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Plain layer norm over the last axis (no affine part)."""
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# --------------------------------------------------------------------------
# equivariant linear maps


@dataclass(frozen=True)
class LinearWeights:
    """Per-degree channel mixing; bias only on degree 0."""

    weight: np.ndarray  # (l_max + 1, C_in, C_out)
    bias: Optional[np.ndarray] = None  # (C_out,)


def so3_linear(x: IrrepsFeature, w: LinearWeights) -> IrrepsFeature:
    if w.weight.shape[0] < x.l_max + 1 or w.weight.shape[1] != x.channels:
        raise IrrepsError(f"linear weights {w.weight.shape} do not fit feature {x.layout}")
    out = np.empty((*x.data.shape[:-1], w.weight.shape[2]), x.data.dtype)
    for L in range(x.l_max + 1):
        s = degree_slice(L)
        out[..., s, :] = x.data[..., s, :] @ w.weight[L]
    if w.bias is not None:
        out[..., 0, :] += w.bias
    return IrrepsFeature(out, x.l_max)


# --------------------------------------------------------------------------
# SO(2) linear layers and the order-major permutation

# Runtime permutation applications, for instrumentation of the fused path.
permutation_counter = {"count": 0}


@functools.lru_cache(maxsize=None)
def order_major_index(l_max: int, m_max: Optional[int] = None) -> np.ndarray:
    """Degree-major flat indices listed order-major.

    Orders ascend from ``-m_max`` to ``m_max``; inside an order, degrees ascend
    from ``|m|`` to ``l_max``. Orders above ``m_max`` are dropped, so the
    result selects (and reorders) the rows the SO(2) layers consume. The
    relative order of the entries of any one degree is preserved.
    """
    mm = l_max if m_max is None else min(m_max, l_max)
    idx = [L * L + L + m for m in range(-mm, mm + 1) for L in range(abs(m), l_max + 1)]
    out = np.asarray(idx, dtype=np.intp)
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=None)
def order_groups(l_max: int, m_max: Optional[int] = None) -> dict:
    """``{m: slice}`` into the order-major layout of :func:`order_major_index`."""
    mm = l_max if m_max is None else min(m_max, l_max)
    groups, offset = {}, 0
    for m in range(-mm, mm + 1):
        n = l_max - abs(m) + 1
        groups[m] = slice(offset, offset + n)
        offset += n
    return groups


def order_major_size(l_max: int, m_max: Optional[int] = None) -> int:
    return len(order_major_index(l_max, m_max))


@dataclass(frozen=True)
class SO2Weights:
    """Weights of an SO(2) linear layer.

    ``w0`` maps the flattened ``m = 0`` inputs (degree x channel) to the
    ``m = 0`` outputs followed by ``extra`` plain scalar outputs. For each
    ``0 < m <= m_max``, ``w1[m-1]`` and ``w2[m-1]`` act on the ``(+m, -m)``
    pair as ``[[w1, -w2], [w2, w1]]``.
    """

    l_in: int
    l_out: int
    m_max: int
    c_in: int
    c_out: int
    w0: np.ndarray
    w1: tuple
    w2: tuple
    bias0: Optional[np.ndarray] = None
    extra: int = 0

    def __post_init__(self):
        n0_in = self.l_in + 1
        n0_out = self.l_out + 1
        if self.w0.shape != (n0_in * self.c_in, n0_out * self.c_out + self.extra):
            raise IrrepsError(f"m=0 block has shape {self.w0.shape}")
        for m in range(1, self.m_max + 1):
            shape = (max(self.l_in - m + 1, 0) * self.c_in, max(self.l_out - m + 1, 0) * self.c_out)
            if self.w1[m - 1].shape != shape or self.w2[m - 1].shape != shape:
                raise IrrepsError(f"order-{m} blocks do not have shape {shape}")

    @classmethod
    def init(cls, rng, l_in, l_out, m_max, c_in, c_out, extra=0, bias=True, dtype=np.float32):
        """Uniform(+-1/sqrt(fan_in)) initialisation."""

        def uni(fan_in, shape):
            b = 1.0 / np.sqrt(max(fan_in, 1))
            return rng.uniform(-b, b, shape).astype(dtype)

        n0 = (l_in + 1) * c_in
        w0 = uni(n0, (n0, (l_out + 1) * c_out + extra))
        w1, w2 = [], []
        for m in range(1, m_max + 1):
            fi = max(l_in - m + 1, 0) * c_in
            shape = (fi, max(l_out - m + 1, 0) * c_out)
            w1.append(uni(fi, shape))
            w2.append(uni(fi, shape))
        b0 = uni(n0, ((l_out + 1) * c_out + extra,)) if bias else None
        if b0 is not None:
            # bias may only touch the degree-0 output and the extra scalars
            b0[c_out : (l_out + 1) * c_out] = 0
        return cls(l_in, l_out, m_max, c_in, c_out, w0, tuple(w1), tuple(w2), b0, extra)

    @classmethod
    def identity(cls, l_max, m_max, channels, dtype=np.float32):
        n0 = (l_max + 1) * channels
        w1, w2 = [], []
        for m in range(1, m_max + 1):
            n = (l_max - m + 1) * channels
            w1.append(np.eye(n, dtype=dtype))
            w2.append(np.zeros((n, n), dtype))
        return cls(l_max, l_max, m_max, channels, channels, np.eye(n0, dtype=dtype), tuple(w1), tuple(w2))

    def tensors(self) -> list:
        out = [self.w0, *self.w1, *self.w2]
        if self.bias0 is not None:
            out.append(self.bias0)
        return out


def so2_linear_fused(xo: np.ndarray, w: SO2Weights):
    """SO(2) linear map on order-major input (as produced by a fused rotation).

    ``xo`` has shape (..., order_major_size(l_in, m_max), c_in). Returns the
    order-major output (..., order_major_size(l_out, m_max), c_out) and the
    extra scalar outputs (..., extra).
    """
    gin = order_groups(w.l_in, w.m_max)
    gout = order_groups(w.l_out, w.m_max)
    if xo.shape[-2] != order_major_size(w.l_in, w.m_max) or xo.shape[-1] != w.c_in:
        raise IrrepsError(f"order-major input shape {xo.shape} does not fit the layer")
    batch = xo.shape[:-2]
    out = np.zeros((*batch, order_major_size(w.l_out, w.m_max), w.c_out), xo.dtype)

    x0 = xo[..., gin[0], :].reshape(*batch, -1)
    y0 = x0 @ w.w0
    if w.bias0 is not None:
        y0 = y0 + w.bias0
    n0 = (w.l_out + 1) * w.c_out
    out[..., gout[0], :] = y0[..., :n0].reshape(*batch, w.l_out + 1, w.c_out)
    extra = y0[..., n0:]

    for m in range(1, w.m_max + 1):
        if m > w.l_out or m > w.l_in:
            continue
        xp = xo[..., gin[m], :].reshape(*batch, -1)
        xn = xo[..., gin[-m], :].reshape(*batch, -1)
        w1, w2 = w.w1[m - 1], w.w2[m - 1]
        n = w.l_out - m + 1
        out[..., gout[m], :] = (xp @ w1 - xn @ w2).reshape(*batch, n, w.c_out)
        out[..., gout[-m], :] = (xp @ w2 + xn @ w1).reshape(*batch, n, w.c_out)
    return out, extra


def so2_linear(x_rotated: IrrepsFeature, w: SO2Weights):
    """SO(2) linear map on a degree-major feature already in the edge frame.

    Reorders into the order-major layout, mixes, and scatters back, counting
    both runtime permutations. Orders above ``m_max`` are ignored on input and
    zero on output. Returns ``(feature, extra_scalars)``.
    """
    if x_rotated.l_max != w.l_in or x_rotated.channels != w.c_in:
        raise IrrepsError(f"feature {x_rotated.layout} does not match layer input")
    idx_in = order_major_index(w.l_in, w.m_max)
    idx_out = order_major_index(w.l_out, w.m_max)
    permutation_counter["count"] += 1
    xo = x_rotated.data[..., idx_in, :]
    yo, extra = so2_linear_fused(xo, w)
    permutation_counter["count"] += 1
    out = np.zeros((*yo.shape[:-2], num_coefficients(w.l_out), w.c_out), yo.dtype)
    out[..., idx_out, :] = yo
    return IrrepsFeature(out, w.l_out), extra


def fuse_permutation(rot: RotationBundle, m_max: Optional[int] = None) -> RotationBundle:
    """Precompute ``D~ = S D`` with S the (order-truncating) order-major reindexing.

    The permuted field has shape (..., order_major_size, K) and is always
    rebuilt from the Wigner blocks, so fusing twice gives the same matrix.
    """
    mm = rot.l_max if m_max is None else m_max
    idx = order_major_index(rot.l_max, mm)
    dense = rot.dense(np.float64)
    permuted = np.ascontiguousarray(dense[..., idx, :])
    return RotationBundle(rot.matrix, rot.wigner, permuted, mm)


def rotation_z_wigner_block(l_max: int, angle) -> np.ndarray:
    """Dense Wigner matrix of a rotation about +z (the edge-frame symmetry axis)."""
    from .irreps import rotation_z, wigner_d

    return wigner_d(rotation_z(np.asarray(angle, dtype=np.float64)), l_max).dense()
