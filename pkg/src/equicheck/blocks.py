"""Edge frames, smooth-cutoff graph attention, feedforward networks, embeddings and heads.

Edge features are processed in an edge-aligned frame in which the edge points
along +z, the polar axis of the harmonic basis. In that frame the fused
rotation ``D~ = S D`` delivers coefficients directly in the order-major layout
the SO(2) layers consume, so no runtime permutation is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .irreps import (
    IrrepsError,
    IrrepsFeature,
    RotationBundle,
    degree1_to_vector,
    num_coefficients,
    wigner_d,
)
from .layers import (
    LinearWeights,
    SO2Weights,
    _gate,
    envelope,
    fuse_permutation,
    gate_activation,
    leaky_relu,
    order_groups,
    order_major_index,
    order_major_size,
    scalar_layer_norm,
    sigmoid,
    silu,
    so2_linear,
    so2_linear_fused,
    so3_linear,
)
from .s2grid import GridFeature, GridSpec, degree_of_index, from_sphere, to_sphere

ACTIVATIONS = ("gate", "s2", "swiglu_s2")
MAX_ATOMIC_NUMBER = 118
SOFTMAX_EPS = 1e-8


def _uniform(rng, fan_in, shape, dtype=np.float32):
    b = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-b, b, shape).astype(dtype)


def _linear(rng, l_max, c_in, c_out, bias=True) -> LinearWeights:
    return LinearWeights(
        _uniform(rng, c_in, (l_max + 1, c_in, c_out)),
        _uniform(rng, c_in, (c_out,)) if bias else None,
    )


# --------------------------------------------------------------------------
# edge frames


def _azimuth_polar(unit: np.ndarray):
    phi = np.arctan2(unit[..., 1], unit[..., 0])
    theta = np.arccos(np.clip(unit[..., 2], -1.0, 1.0))
    return phi, theta


def align_matrix(edge_vec) -> np.ndarray:
    """Rotation taking ``edge_vec / |edge_vec|`` to +z.

    Built as ``R_y(-theta) R_z(-phi)`` from the spherical angles of the edge.
    Edges on the polar axis have an undefined azimuth; ``arctan2(0, 0) = 0``
    is used, so -z maps to +z by a half turn about y.
    """
    v = np.asarray(edge_vec, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(v)):
        raise IrrepsError("cannot align a zero-length or non-finite edge")
    phi, theta = _azimuth_polar(v / n)
    cp, sp, ct, st = np.cos(phi), np.sin(phi), np.cos(theta), np.sin(theta)
    out = np.zeros((*v.shape[:-1], 3, 3))
    # R_y(-theta) @ R_z(-phi)
    out[..., 0, 0] = ct * cp
    out[..., 0, 1] = ct * sp
    out[..., 0, 2] = -st
    out[..., 1, 0] = -sp
    out[..., 1, 1] = cp
    out[..., 2, 0] = st * cp
    out[..., 2, 1] = st * sp
    out[..., 2, 2] = ct
    return out


def align_rotation(edge_vec, l_max: int = 1, m_max: Optional[int] = None) -> RotationBundle:
    """Edge-aligning rotation with Wigner blocks and the fused permuted matrix."""
    return fuse_permutation(wigner_d(align_matrix(edge_vec), l_max), m_max)


@dataclass
class EdgeFrames:
    """Per-edge geometry shared by every block of one forward pass."""

    src: np.ndarray
    dst: np.ndarray
    vec: np.ndarray
    dist: np.ndarray
    n_nodes: int
    l_max: int
    m_max: int
    rot: RotationBundle
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, src, dst, vec, n_nodes, l_max, m_max) -> "EdgeFrames":
        src = np.asarray(src, dtype=np.intp)
        dst = np.asarray(dst, dtype=np.intp)
        vec = np.asarray(vec, dtype=np.float64).reshape(-1, 3)
        if len(src) != len(dst) or len(src) != len(vec):
            raise IrrepsError("edge arrays have inconsistent lengths")
        if len(src) and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= n_nodes):
            raise IrrepsError("edge index refers to a node that does not exist")
        dist = np.linalg.norm(vec, axis=-1)
        if len(src):
            rot = align_rotation(vec, l_max, m_max)
        else:
            eye = wigner_d(np.zeros((0, 3, 3)) + np.eye(3), l_max)
            rot = fuse_permutation(eye, m_max)
        return cls(src, dst, vec, dist, int(n_nodes), l_max, min(m_max, l_max), rot)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def permuted(self, dtype=np.float32) -> np.ndarray:
        """``D~`` with shape (E, order_major_size, K)."""
        key = ("permuted", np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = np.ascontiguousarray(self.rot.permuted.astype(dtype))
        return self._cache[key]

    def permuted_t(self, dtype=np.float32) -> np.ndarray:
        key = ("permuted_t", np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = np.ascontiguousarray(np.swapaxes(self.permuted(dtype), -1, -2))
        return self._cache[key]

    def dense(self, dtype=np.float32) -> np.ndarray:
        return self.rot.dense(dtype)

    def envelope(self, r_cut: float, p: int) -> np.ndarray:
        key = ("env", r_cut, p)
        if key not in self._cache:
            self._cache[key] = envelope(self.dist, r_cut, p)
        return self._cache[key]


def aggregate(messages: np.ndarray, dst: np.ndarray, n_nodes: int) -> np.ndarray:
    """Sum edge messages into destination nodes in edge-index order."""
    out = np.zeros((n_nodes, *messages.shape[1:]), messages.dtype)
    np.add.at(out, dst, messages)
    return out


# --------------------------------------------------------------------------
# radial features


@dataclass(frozen=True)
class RadialFeatures:
    """Gaussian basis on [0, r_cut] followed by a two-layer SiLU MLP."""

    centers: np.ndarray
    width: float
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng, n_basis: int, r_cut: float, hidden: int, out_dim: int) -> "RadialFeatures":
        centers = np.linspace(0.0, r_cut, n_basis)
        width = r_cut / max(n_basis - 1, 1)
        return cls(
            centers,
            width,
            _uniform(rng, n_basis, (n_basis, hidden)),
            _uniform(rng, n_basis, (hidden,)),
            _uniform(rng, hidden, (hidden, out_dim)),
            _uniform(rng, hidden, (out_dim,)),
        )

    @property
    def n_basis(self) -> int:
        return len(self.centers)

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def basis(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)[..., None]
        return np.exp(-0.5 * ((r - self.centers) / self.width) ** 2).astype(np.float32)

    def __call__(self, r) -> np.ndarray:
        h = silu(self.basis(r) @ self.w1 + self.b1)
        return h @ self.w2 + self.b2

    def tensors(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]


def _expand_orders(rad: np.ndarray, l_max: int, m_max: int, channels: int) -> np.ndarray:
    """Spread per-(|m|, degree, channel) radial values over the order-major rows."""
    groups = order_groups(l_max, m_max)
    out = np.empty((rad.shape[0], order_major_size(l_max, m_max), channels), rad.dtype)
    offset = 0
    for m in range(0, min(m_max, l_max) + 1):
        n = l_max - m + 1
        block = rad[:, offset : offset + n * channels].reshape(-1, n, channels)
        out[:, groups[m], :] = block
        if m:
            out[:, groups[-m], :] = block
        offset += n * channels
    return out


def radial_width(l_max: int, m_max: int, channels: int) -> int:
    return sum(l_max - m + 1 for m in range(min(m_max, l_max) + 1)) * channels


# --------------------------------------------------------------------------
# smooth softmax


def smooth_softmax(
    logits,
    distances,
    r_cut: float,
    p: int = 5,
    index=None,
    n_groups: Optional[int] = None,
    envelope_in_softmax: bool = True,
) -> np.ndarray:
    """Softmax over each neighbourhood with the cutoff envelope inside the sum.

    ``a_ij = u_ij exp(z_ij - max_k z_ik) / (sum_k u_ik exp(z_ik - max_k z_ik) + 1e-8)``.
    ``index`` assigns each entry to a neighbourhood (default: one neighbourhood).
    Extra trailing axes of ``logits`` (attention heads) are handled independently.
    With ``envelope_in_softmax=False`` the envelope is left out of both numerator
    and denominator.
    """
    z = np.asarray(logits)
    if z.shape[0] == 0:
        return np.zeros_like(z)
    if index is None:
        index = np.zeros(z.shape[0], dtype=np.intp)
        n_groups = 1
    n_groups = int(index.max()) + 1 if n_groups is None else n_groups
    zmax = np.full((n_groups, *z.shape[1:]), -np.inf, z.dtype)
    np.maximum.at(zmax, index, z)
    e = np.exp(z - zmax[index])
    if envelope_in_softmax:
        env = envelope(distances, r_cut, p).astype(z.dtype)
        e = e * env.reshape(-1, *([1] * (z.ndim - 1)))
    denom = np.zeros_like(zmax)
    np.add.at(denom, index, e)
    return e / (denom[index] + SOFTMAX_EPS)


# --------------------------------------------------------------------------
# activations on edge-frame (order-major, order-truncated) features


def _edge_activation(kind, yo, extra, l_max, m_max, grid: Optional[GridSpec], hidden):
    if kind == "gate":
        idx = order_major_index(l_max, m_max)
        gates = extra.reshape(*extra.shape[:-1], l_max, hidden)
        return _gate(yo, gates, degree_of_index(l_max)[idx])
    index = tuple(order_major_index(l_max, m_max))
    to_m = grid.to_matrix(l_max, yo.dtype, index)
    from_m = grid.from_matrix(l_max, yo.dtype, index)
    if kind == "s2":
        return from_m @ silu(to_m @ yo)
    if kind == "swiglu_s2":
        g1 = to_m @ yo[..., :hidden]
        g2 = to_m @ yo[..., hidden:]
        gate = sigmoid(extra)[..., None, :]
        return from_m @ (gate * g1 * g2)
    raise IrrepsError(f"unknown activation {kind!r}")


def _degree_major_activation(kind, x: IrrepsFeature, extra, grid, hidden) -> IrrepsFeature:
    if kind == "gate":
        gates = extra.reshape(*extra.shape[:-1], x.l_max, hidden)
        return gate_activation(x, gates)
    if kind == "s2":
        g = to_sphere(x, grid)
        return from_sphere(g.with_data(silu(g.data)), x.l_max)
    if kind == "swiglu_s2":
        g = to_sphere(x, grid)
        gate = sigmoid(extra)[..., None, None, :]
        prod = gate * g.data[..., :hidden] * g.data[..., hidden:]
        return from_sphere(GridFeature(prod, grid), x.l_max)
    raise IrrepsError(f"unknown activation {kind!r}")


def _gate_count(kind, l_max, hidden) -> int:
    return {"gate": l_max * hidden, "s2": 0, "swiglu_s2": hidden}[kind]


# --------------------------------------------------------------------------
# graph attention


@dataclass(frozen=True)
class AttentionSpec:
    l_max: int
    m_max: int
    channels: int
    heads: int = 2
    d_alpha: int = 8
    d_value: int = 8
    d_hidden: int = 8
    c_out: Optional[int] = None
    activation: str = "swiglu_s2"
    grid: Optional[GridSpec] = None
    r_cut: float = 5.0
    p: int = 5
    envelope_in_softmax: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise IrrepsError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.activation != "gate" and self.grid is None:
            raise IrrepsError(f"{self.activation} attention needs a grid")

    @property
    def hidden(self) -> int:
        return self.heads * self.d_hidden

    @property
    def out_channels(self) -> int:
        return self.channels if self.c_out is None else self.c_out


@dataclass(frozen=True)
class AttentionWeights:
    spec: AttentionSpec
    radial: RadialFeatures
    so2_first: SO2Weights
    alpha_dot: np.ndarray  # (heads, d_alpha)
    so2_second: SO2Weights
    out: LinearWeights

    @classmethod
    def init(cls, rng, spec: AttentionSpec, n_basis=16, radial_hidden=32) -> "AttentionWeights":
        L, M, C, H = spec.l_max, spec.m_max, spec.channels, spec.hidden
        width = 2 * H if spec.activation == "swiglu_s2" else H
        extra = spec.heads * spec.d_alpha + _gate_count(spec.activation, L, H)
        radial = RadialFeatures.init(rng, n_basis, spec.r_cut, radial_hidden, radial_width(L, M, 2 * C))
        first = SO2Weights.init(rng, L, L, M, 2 * C, width, extra=extra)
        second = SO2Weights.init(rng, L, L, M, H, spec.heads * spec.d_value, bias=False)
        alpha_dot = _uniform(rng, spec.d_alpha, (spec.heads, spec.d_alpha))
        out = _linear(rng, L, spec.heads * spec.d_value, spec.out_channels)
        return cls(spec, radial, first, alpha_dot, second, out)

    def tensors(self) -> list:
        return [
            *self.radial.tensors(),
            *self.so2_first.tensors(),
            self.alpha_dot,
            *self.so2_second.tensors(),
            self.out.weight,
            self.out.bias,
        ]


def graph_attention(
    x: IrrepsFeature, frames: EdgeFrames, w: AttentionWeights, fused: bool = True
) -> IrrepsFeature:
    """Equivariant graph attention with the envelope inside the softmax.

    Source and destination features are concatenated per edge, rotated into the
    edge frame, mixed by an SO(2) layer whose extra scalar outputs provide the
    attention logits (and gates), activated, mixed again, weighted by
    ``a_ij * u(r_ij)``, rotated back and summed into the destination node.
    Heads are a reshape of the value channels. ``fused=False`` runs the
    reference path with explicit reordering around both SO(2) layers.
    """
    s = w.spec
    if x.l_max != s.l_max or x.channels != s.channels:
        raise IrrepsError(f"attention expects {(s.l_max, s.channels)}, got {(x.l_max, x.channels)}")
    E, L, M, H = frames.n_edges, s.l_max, s.m_max, s.hidden
    n_alpha = s.heads * s.d_alpha
    dtype = x.data.dtype
    if E == 0:
        return IrrepsFeature(np.zeros((frames.n_nodes, num_coefficients(L), s.out_channels), dtype), L)

    xe = np.concatenate([x.data[frames.dst], x.data[frames.src]], axis=-1)
    rad = _expand_orders(w.radial(frames.dist).astype(dtype), L, M, 2 * s.channels)
    env = frames.envelope(s.r_cut, s.p).astype(dtype)
    idx = order_major_index(L, M)

    if fused:
        xo = (frames.permuted(dtype) @ xe) * rad
        yo, extra = so2_linear_fused(xo, w.so2_first)
    else:
        xr = frames.dense(dtype) @ xe
        scale = np.zeros_like(xr)
        scale[:, idx, :] = rad
        y, extra = so2_linear(IrrepsFeature(xr * scale, L), w.so2_first)

    alpha = scalar_layer_norm(extra[:, :n_alpha].reshape(E, s.heads, s.d_alpha))
    logits = (leaky_relu(alpha) * w.alpha_dot).sum(-1)
    a = smooth_softmax(
        logits, frames.dist, s.r_cut, s.p, frames.dst, frames.n_nodes, s.envelope_in_softmax
    ).astype(dtype)
    weight = (a * env[:, None])[:, None, :, None]

    if fused:
        ho = _edge_activation(s.activation, yo, extra[:, n_alpha:], L, M, s.grid, H)
        vo, _ = so2_linear_fused(ho, w.so2_second)
        msg = (vo.reshape(E, len(idx), s.heads, s.d_value) * weight).reshape(E, len(idx), -1)
        msg = frames.permuted_t(dtype) @ msg
    else:
        h = _degree_major_activation(s.activation, y, extra[:, n_alpha:], s.grid, H)
        v, _ = so2_linear(h, w.so2_second)
        K = num_coefficients(L)
        msg = (v.data.reshape(E, K, s.heads, s.d_value) * weight).reshape(E, K, -1)
        msg = np.swapaxes(frames.dense(dtype), -1, -2) @ msg

    agg = aggregate(msg, frames.dst, frames.n_nodes)
    return so3_linear(IrrepsFeature(agg, L), w.out)


# --------------------------------------------------------------------------
# feedforward network


@dataclass(frozen=True)
class FFNWeights:
    activation: str
    l_max: int
    lin_in: LinearWeights
    lin_out: LinearWeights
    gate_w: Optional[np.ndarray] = None
    gate_b: Optional[np.ndarray] = None
    grid_in: Optional[np.ndarray] = None
    grid_out: Optional[np.ndarray] = None

    @property
    def hidden(self) -> int:
        return self.lin_out.weight.shape[1]

    @classmethod
    def init(
        cls, rng, activation, l_max, channels, d_ffn, c_out=None, grid_linear=True
    ) -> "FFNWeights":
        if activation not in ACTIVATIONS:
            raise IrrepsError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        c_out = channels if c_out is None else c_out
        width = 2 * d_ffn if activation == "swiglu_s2" else d_ffn
        lin_in = _linear(rng, l_max, channels, width)
        n_gate = _gate_count(activation, l_max, d_ffn)
        gate_w = _uniform(rng, channels, (channels, n_gate)) if n_gate else None
        gate_b = _uniform(rng, channels, (n_gate,)) if n_gate else None
        grid_in = grid_out = None
        if grid_linear and activation != "gate":
            grid_in = _uniform(rng, width, (width, width))
            grid_out = _uniform(rng, d_ffn, (d_ffn, d_ffn))
        lin_out = _linear(rng, l_max, d_ffn, c_out)
        return cls(activation, l_max, lin_in, lin_out, gate_w, gate_b, grid_in, grid_out)

    def tensors(self) -> list:
        out = [self.lin_in.weight, self.lin_in.bias, self.lin_out.weight, self.lin_out.bias]
        for t in (self.gate_w, self.gate_b, self.grid_in, self.grid_out):
            if t is not None:
                out.append(t)
        return out


def feed_forward(x: IrrepsFeature, w: FFNWeights, grid: Optional[GridSpec] = None) -> IrrepsFeature:
    """Input linear, activation (through the grid for s2 and swiglu_s2), output linear.

    The SwiGLU-S2 gate is a linear map of the input's degree-0 channels; the
    gate activation draws its per-degree gates the same way.
    """
    h = so3_linear(x, w.lin_in)
    d = w.hidden
    gate = None
    if w.gate_w is not None:
        gate = x.data[..., 0, :] @ w.gate_w + w.gate_b
    if w.activation == "gate":
        h = gate_activation(h, gate.reshape(*gate.shape[:-1], x.l_max, d))
    else:
        if grid is None:
            raise IrrepsError(f"{w.activation} feedforward needs a grid")
        g = to_sphere(h, grid).data
        if w.grid_in is not None:
            g = g @ w.grid_in
        if w.activation == "s2":
            g = silu(g)
        else:
            g = sigmoid(gate)[..., None, None, :] * g[..., :d] * g[..., d:]
        if w.grid_out is not None:
            g = g @ w.grid_out
        h = from_sphere(GridFeature(g, grid), x.l_max)
    return so3_linear(h, w.lin_out)


# --------------------------------------------------------------------------
# embeddings and heads


def atom_embedding(species, table: np.ndarray, l_max: int) -> IrrepsFeature:
    """Look up per-species scalar channels; all degree > 0 entries are zero."""
    z = np.asarray(species, dtype=np.intp)
    if np.any(z < 1) or np.any(z >= table.shape[0]):
        raise IrrepsError(f"species outside the embedding table (1..{table.shape[0] - 1})")
    return IrrepsFeature.from_scalars(table[z], l_max)


@dataclass(frozen=True)
class EdgeDegreeWeights:
    radial: RadialFeatures
    so2: SO2Weights
    r_cut: float
    p: int = 5
    norm: float = 1.0  # divisor, typically an average neighbour count

    @classmethod
    def init(cls, rng, l_max, m_max, channels, r_cut, p=5, n_basis=16, d_edge=32, norm=1.0):
        radial = RadialFeatures.init(rng, n_basis, r_cut, d_edge, d_edge)
        so2 = SO2Weights.init(rng, 0, l_max, m_max, d_edge, channels, bias=False)
        return cls(radial, so2, r_cut, p, norm)

    def tensors(self) -> list:
        return [*self.radial.tensors(), *self.so2.tensors()]


def edge_degree_embedding(frames: EdgeFrames, w: EdgeDegreeWeights, dtype=np.float32) -> IrrepsFeature:
    """Radial features lifted to every degree in the edge frame and summed at each node.

    Every contribution carries the cutoff envelope so that atoms crossing the
    cutoff change the embedding smoothly.
    """
    L = w.so2.l_out
    if frames.n_edges == 0:
        return IrrepsFeature(np.zeros((frames.n_nodes, num_coefficients(L), w.so2.c_out), dtype), L)
    rad = w.radial(frames.dist).astype(dtype)[:, None, :]
    yo, _ = so2_linear_fused(rad, w.so2)
    env = frames.envelope(w.r_cut, w.p).astype(dtype)
    msg = frames.permuted_t(dtype) @ (yo * (env / w.norm)[:, None, None])
    return IrrepsFeature(aggregate(msg, frames.dst, frames.n_nodes), L)


def energy_head(x: IrrepsFeature, w: FFNWeights, grid: Optional[GridSpec] = None) -> float:
    """Per-node FFN (gate activation) to one scalar, summed exactly over nodes."""
    if x.data.shape[0] == 0:
        raise IrrepsError("energy of an empty graph is undefined")
    e = feed_forward(x, w, grid).data[:, 0, 0]
    return math.fsum(e.astype(np.float64))


def force_head(x: IrrepsFeature, frames: EdgeFrames, w: AttentionWeights) -> np.ndarray:
    """One attention pass emitting a single degree-1 channel, read out as (x, y, z)."""
    if w.spec.out_channels != 1:
        raise IrrepsError("force head attention must emit exactly one channel")
    out = graph_attention(x, frames, w)
    return degree1_to_vector(out.data[:, 1:4, 0].astype(np.float64))
