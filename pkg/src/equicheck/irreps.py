"""Irreps features, real spherical harmonics, Wigner-D rotations and coupling tables.

Conventions used throughout the package:

* real orthonormal spherical harmonics, no Condon-Shortley phase, polar axis +z;
* coefficients stored degree-major, orders ascending ``-L..L`` inside a degree,
  so ``(L, m)`` lives at flat row ``L*L + L + m``;
* degree-1 components are ``(y, z, x)`` up to the common factor ``sqrt(3/4pi)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

import numpy as np

L_CEILING = 16
Y00 = 0.5 / math.sqrt(math.pi)
ZERO_THRESHOLD = 1e-9

# index of the Cartesian axis carried by the degree-1 orders m = -1, 0, 1
_DEG1_AXES = np.array([1, 2, 0])


class IrrepsError(ValueError):
    """Raised for invalid degrees, orders, shapes or rotations."""


def num_coefficients(l_max: int) -> int:
    return (l_max + 1) ** 2


def degree_slice(L: int) -> slice:
    return slice(L * L, (L + 1) * (L + 1))


def _check_degree(l_max: int) -> None:
    if not isinstance(l_max, (int, np.integer)) or l_max < 0:
        raise IrrepsError(f"degree must be a non-negative integer, got {l_max!r}")
    if l_max > L_CEILING:
        raise IrrepsError(f"degree {l_max} exceeds the supported ceiling {L_CEILING}")


@dataclass(frozen=True)
class IrrepsLayout:
    l_max: int
    channels: int

    def __post_init__(self):
        _check_degree(self.l_max)
        if self.channels < 1:
            raise IrrepsError(f"channels must be positive, got {self.channels}")

    @property
    def dim(self) -> int:
        return num_coefficients(self.l_max)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.dim, self.channels)


def flat_index(L: int, m: int, i: int, layout: IrrepsLayout) -> tuple[int, int]:
    """Return the ``(row, channel)`` position of coefficient ``(L, m, i)``."""
    if not 0 <= L <= layout.l_max:
        raise IrrepsError(f"degree {L} outside [0, {layout.l_max}]")
    if not -L <= m <= L:
        raise IrrepsError(f"order {m} outside [-{L}, {L}]")
    if not 0 <= i < layout.channels:
        raise IrrepsError(f"channel {i} outside [0, {layout.channels})")
    return L * L + L + m, i


@dataclass(frozen=True)
class IrrepsFeature:
    """Coefficient block of shape ``(..., (l_max+1)**2, channels)``.

    Leading axes are batch axes (nodes, edges, trials) and are carried through
    every operation unchanged.
    """

    data: np.ndarray
    l_max: int
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        _check_degree(self.l_max)
        data = np.asarray(self.data)
        if data.ndim < 2 or data.shape[-2] != num_coefficients(self.l_max):
            raise IrrepsError(
                f"data shape {data.shape} incompatible with l_max={self.l_max}"
            )
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def layout(self) -> IrrepsLayout:
        return IrrepsLayout(self.l_max, self.channels)

    def degree(self, L: int) -> np.ndarray:
        return self.data[..., degree_slice(L), :]

    def with_data(self, data: np.ndarray) -> "IrrepsFeature":
        return IrrepsFeature(data, self.l_max)

    @classmethod
    def zeros(cls, l_max: int, channels: int, batch=(), dtype=np.float32):
        return cls(np.zeros((*batch, num_coefficients(l_max), channels), dtype), l_max)

    @classmethod
    def from_scalars(cls, scalars: np.ndarray, l_max: int) -> "IrrepsFeature":
        scalars = np.asarray(scalars)
        out = np.zeros(
            (*scalars.shape[:-1], num_coefficients(l_max), scalars.shape[-1]),
            scalars.dtype,
        )
        out[..., 0, :] = scalars
        return cls(out, l_max)


# --------------------------------------------------------------------------
# spherical harmonics


def spherical_harmonics(direction, l_max: int) -> np.ndarray:
    """Real orthonormal spherical harmonics up to ``l_max``.

    Parameters
    ----------
    direction : array_like, shape (..., 3)
        Direction vectors. They are normalised here; zero vectors are rejected.
    l_max : int
        Maximum degree.

    Returns
    -------
    np.ndarray, shape (..., (l_max+1)**2), float64
    """
    _check_degree(l_max)
    v = np.asarray(direction, dtype=np.float64)
    if v.shape[-1] != 3:
        raise IrrepsError(f"directions must have trailing size 3, got {v.shape}")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < 1e-12) or not np.all(np.isfinite(norm)):
        raise IrrepsError("zero-length or non-finite direction")
    x, y, z = np.moveaxis(v / norm, -1, 0)

    out = np.empty((*x.shape, num_coefficients(l_max)), np.float64)
    # (x + iy)^m = sin^m(theta) e^{i m phi}
    cos_m = [np.ones_like(x)]
    sin_m = [np.zeros_like(x)]
    for _ in range(l_max):
        c, s = cos_m[-1], sin_m[-1]
        cos_m.append(c * x - s * y)
        sin_m.append(c * y + s * x)

    for m in range(l_max + 1):
        # q_l = P_l^m(z) / sin^m(theta), built upward in l
        q_prev = np.full_like(z, float(_double_factorial(2 * m - 1)))
        q_cur = None
        for L in range(m, l_max + 1):
            if L == m:
                q = q_prev
            elif L == m + 1:
                q_cur = (2 * m + 1) * z * q_prev
                q = q_cur
            else:
                q_next = ((2 * L - 1) * z * q_cur - (L + m - 1) * q_prev) / (L - m)
                q_prev, q_cur = q_cur, q_next
                q = q_cur
            norm_lm = math.sqrt(
                (2 * L + 1) / (4 * math.pi) * math.exp(math.lgamma(L - m + 1) - math.lgamma(L + m + 1))
            )
            base = L * L + L
            if m == 0:
                out[..., base] = norm_lm * q
            else:
                out[..., base + m] = math.sqrt(2.0) * norm_lm * q * cos_m[m]
                out[..., base - m] = math.sqrt(2.0) * norm_lm * q * sin_m[m]
    return out


def _double_factorial(n: int) -> int:
    return math.prod(range(n, 0, -2)) if n > 0 else 1


def sh_basis_matrix(rotation: np.ndarray) -> np.ndarray:
    """Express a 3x3 rotation in the degree-1 ``(y, z, x)`` component basis."""
    r = np.asarray(rotation)
    return r[..., _DEG1_AXES[:, None], _DEG1_AXES[None, :]]


def vector_to_degree1(v: np.ndarray) -> np.ndarray:
    """Cartesian ``(x, y, z)`` -> degree-1 orders ``(m=-1, 0, 1)``."""
    return np.asarray(v)[..., _DEG1_AXES]


def degree1_to_vector(c: np.ndarray) -> np.ndarray:
    return np.asarray(c)[..., np.argsort(_DEG1_AXES)]


# --------------------------------------------------------------------------
# rotations


@dataclass(frozen=True)
class RotationBundle:
    """A rotation with its per-degree Wigner-D blocks.

    ``matrix`` has shape (..., 3, 3); ``wigner[L]`` has shape (..., 2L+1, 2L+1).
    ``permuted`` holds the fused order-major matrix once
    :func:`equicheck.layers.fuse_permutation` has been applied.
    """

    matrix: np.ndarray
    wigner: tuple
    permuted: Optional[np.ndarray] = None
    m_max: Optional[int] = None
    _dense: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def l_max(self) -> int:
        return len(self.wigner) - 1

    @property
    def batch_shape(self) -> tuple:
        return self.matrix.shape[:-2]

    def dense(self, dtype=np.float64) -> np.ndarray:
        """Block-diagonal matrix of shape (..., K, K)."""
        key = np.dtype(dtype).str
        if key not in self._dense:
            K = num_coefficients(self.l_max)
            out = np.zeros((*self.batch_shape, K, K), dtype)
            for L, block in enumerate(self.wigner):
                s = degree_slice(L)
                out[..., s, s] = block
            self._dense[key] = out
        return self._dense[key]

    def inverse(self) -> "RotationBundle":
        tr = lambda a: np.swapaxes(a, -1, -2)
        return RotationBundle(tr(self.matrix), tuple(tr(b) for b in self.wigner))

    def __getitem__(self, idx) -> "RotationBundle":
        return RotationBundle(
            self.matrix[idx],
            tuple(b[idx] for b in self.wigner),
            None if self.permuted is None else self.permuted[idx],
            self.m_max,
        )


def _check_rotation(r: np.ndarray, tol: float = 1e-5) -> None:
    if r.shape[-2:] != (3, 3):
        raise IrrepsError(f"rotation must have trailing shape (3, 3), got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise IrrepsError("rotation contains non-finite entries")
    eye = np.eye(3)
    if np.max(np.abs(r @ np.swapaxes(r, -1, -2) - eye), initial=0.0) > tol:
        raise IrrepsError("rotation is not orthogonal")
    if np.max(np.abs(np.linalg.det(r) - 1.0), initial=0.0) > tol:
        raise IrrepsError("rotation has determinant != +1 (reflections unsupported)")


def wigner_d(rotation, l_max: int) -> RotationBundle:
    """Wigner-D blocks of a (batch of) rotation matrices.

    Degree 1 is the rotation conjugated into the ``(y, z, x)`` basis; higher
    degrees follow the Ivanic-Ruedenberg recursion for real harmonics.
    """
    _check_degree(l_max)
    r = np.asarray(rotation, dtype=np.float64)
    _check_rotation(r)
    batch = r.shape[:-2]
    blocks = [np.ones((*batch, 1, 1))]
    if l_max >= 1:
        r1 = sh_basis_matrix(r)
        blocks.append(r1)
        for L in range(2, l_max + 1):
            blocks.append(_ivanic_ruedenberg_step(r1, blocks[-1], L))
    return RotationBundle(r, tuple(blocks))


def _ivanic_ruedenberg_step(r1: np.ndarray, prev: np.ndarray, L: int) -> np.ndarray:
    # r1[..., i+1, j+1] for i, j in {-1, 0, 1}; prev[..., a+L-1, b+L-1] for |a|,|b| <= L-1
    def R1(i, j):
        return r1[..., i + 1, j + 1]

    def Rp(a, b):
        return prev[..., a + L - 1, b + L - 1]

    def P(i, a, b):
        if b == L:
            return R1(i, 1) * Rp(a, L - 1) - R1(i, -1) * Rp(a, -L + 1)
        if b == -L:
            return R1(i, 1) * Rp(a, -L + 1) + R1(i, -1) * Rp(a, L - 1)
        return R1(i, 0) * Rp(a, b)

    out = np.zeros((*r1.shape[:-2], 2 * L + 1, 2 * L + 1))
    for m in range(-L, L + 1):
        am = abs(m)
        for n in range(-L, L + 1):
            d = (L + n) * (L - n) if abs(n) < L else 2 * L * (2 * L - 1)
            u = math.sqrt((L + m) * (L - m) / d)
            v = 0.5 * math.sqrt((1 + (m == 0)) * (L + am - 1) * (L + am) / d) * (1 - 2 * (m == 0))
            w = -0.5 * math.sqrt((L - am - 1) * (L - am) / d) * (1 - (m == 0))
            acc = 0.0
            if u:
                acc = acc + u * P(0, m, n)
            if v:
                if m == 0:
                    V = P(1, 1, n) + P(-1, -1, n)
                elif m > 0:
                    V = P(1, m - 1, n) * math.sqrt(1 + (m == 1)) - P(-1, -m + 1, n) * (1 - (m == 1))
                else:
                    V = P(1, m + 1, n) * (1 - (m == -1)) + P(-1, -m - 1, n) * math.sqrt(1 + (m == -1))
                acc = acc + v * V
            if w:
                if m > 0:
                    W = P(1, m + 1, n) + P(-1, -m - 1, n)
                else:
                    W = P(1, m - 1, n) - P(-1, -m + 1, n)
                acc = acc + w * W
            out[..., m + L, n + L] = acc
    return out


def rotate_feature(x: IrrepsFeature, rot: RotationBundle) -> IrrepsFeature:
    """Apply ``D^(L)`` to every degree block of every channel."""
    if rot.l_max < x.l_max:
        raise IrrepsError(f"rotation covers l_max={rot.l_max}, feature needs {x.l_max}")
    out = np.empty_like(x.data)
    for L in range(x.l_max + 1):
        s = degree_slice(L)
        out[..., s, :] = rot.wigner[L].astype(x.data.dtype) @ x.data[..., s, :]
    return x.with_data(out)


def random_rotation(seed: int, l_max: int = 1, size: Optional[int] = None) -> RotationBundle:
    """Haar-uniform rotation(s) from a normalised Gaussian quaternion."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((4,) if size is None else (size, 4))
    return wigner_d(quaternion_to_matrix(q), l_max)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def rotation_z(angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    o, i = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, -s, o], -1), np.stack([s, c, o], -1), np.stack([o, o, i], -1)], -2)


def rotation_y(angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    o, i = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, o, s], -1), np.stack([o, i, o], -1), np.stack([-s, o, c], -1)], -2)


# --------------------------------------------------------------------------
# coupling tables


@dataclass(frozen=True)
class CouplingTable:
    """Sparse coupling coefficients stored as dense per-path blocks.

    ``blocks[(L1, L2, L3)]`` has shape (2L1+1, 2L2+1, 2L3+1); paths whose block
    is identically zero are absent.
    """

    l_max: int
    blocks: dict
    kind: str

    def __getitem__(self, key) -> float:
        L1, m1, L2, m2, L3, m3 = key
        block = self.blocks.get((L1, L2, L3))
        if block is None:
            return 0.0
        return float(block[m1 + L1, m2 + L2, m3 + L3])

    def items(self):
        for (L1, L2, L3), block in sorted(self.blocks.items()):
            for idx in zip(*np.nonzero(block)):
                a, b, c = (int(i) for i in idx)
                yield (L1, a - L1, L2, b - L2, L3, c - L3), float(block[a, b, c])

    def __len__(self) -> int:
        return sum(int(np.count_nonzero(b)) for b in self.blocks.values())

    @functools.cached_property
    def _dense_cache(self) -> dict:
        return {}

    def dense(self, l1: int, l2: int, l3: int, dtype=np.float64) -> np.ndarray:
        """Dense (K1, K2, K3) coefficient tensor restricted to the given degrees."""
        key = (l1, l2, l3, np.dtype(dtype).str)
        cache = self._dense_cache
        if key not in cache:
            out = np.zeros((num_coefficients(l1), num_coefficients(l2), num_coefficients(l3)), dtype)
            for (L1, L2, L3), block in self.blocks.items():
                if L1 <= l1 and L2 <= l2 and L3 <= l3:
                    out[degree_slice(L1), degree_slice(L2), degree_slice(L3)] = block
            cache[key] = out
        return cache[key]


# CGTable and GauntTable share a representation; the names document intent.
CGTable = CouplingTable
GauntTable = CouplingTable


def _complex_cg(j1: int, m1: int, j2: int, m2: int, J: int, M: int) -> float:
    """<j1 m1 j2 m2 | J M> by the Racah formula, summed exactly."""
    if M != m1 + m2 or abs(m1) > j1 or abs(m2) > j2 or abs(M) > J:
        return 0.0
    if not abs(j1 - j2) <= J <= j1 + j2:
        return 0.0
    f = math.factorial
    pref = Fraction(
        (2 * J + 1) * f(J + j1 - j2) * f(J - j1 + j2) * f(j1 + j2 - J),
        f(j1 + j2 + J + 1),
    ) * (f(J + M) * f(J - M) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2))
    total = Fraction(0)
    for k in range(0, j1 + j2 - J + 1):
        denoms = (
            k,
            j1 + j2 - J - k,
            j1 - m1 - k,
            j2 + m2 - k,
            J - j2 + m1 + k,
            J - j1 - m2 + k,
        )
        if min(denoms) < 0:
            continue
        total += Fraction((-1) ** k, math.prod(f(d) for d in denoms))
    return math.copysign(math.sqrt(float(pref * total * total)), float(total)) if total else 0.0


def _real_from_complex(L: int) -> np.ndarray:
    """Unitary U with Y_real = U @ Y_complex (Condon-Shortley complex harmonics)."""
    U = np.zeros((2 * L + 1, 2 * L + 1), np.complex128)
    U[L, L] = 1.0
    s = 1 / math.sqrt(2)
    for a in range(1, L + 1):
        sign = (-1) ** a
        U[L + a, L + a] = sign * s
        U[L + a, L - a] = s
        U[L - a, L + a] = -1j * sign * s
        U[L - a, L - a] = 1j * s
    return U


@functools.lru_cache(maxsize=None)
def _real_cg_block(L1: int, L2: int, L3: int) -> np.ndarray:
    C = np.zeros((2 * L1 + 1, 2 * L2 + 1, 2 * L3 + 1))
    for m1 in range(-L1, L1 + 1):
        for m2 in range(-L2, L2 + 1):
            m3 = m1 + m2
            if abs(m3) <= L3:
                C[m1 + L1, m2 + L2, m3 + L3] = _complex_cg(L1, m1, L2, m2, L3, m3)
    U1, U2, U3 = _real_from_complex(L1), _real_from_complex(L2), _real_from_complex(L3)
    real = np.einsum("ai,bj,ijk,ck->abc", U1.conj(), U2.conj(), C, U3)
    part = real.real if np.abs(real.real).max() >= np.abs(real.imag).max() else real.imag
    part = np.where(np.abs(part) < 1e-12, 0.0, part)
    # sign convention: first nonzero entry in flat order is positive
    nz = part[np.nonzero(part)]
    if nz.size and nz[0] < 0:
        part = -part
    return part


@functools.lru_cache(maxsize=None)
def cg_table(l_max: int) -> CGTable:
    """Real-basis Clebsch-Gordan table scaled so the scalar coupling equals Y00.

    Every path keeps the unitary normalisation of the standard coefficients, so
    ``sum_{m1,m2} C^2 = Y00**2`` for each output order.
    """
    _check_degree(l_max)
    blocks = {}
    for L1 in range(l_max + 1):
        for L2 in range(l_max + 1):
            for L3 in range(abs(L1 - L2), min(L1 + L2, l_max) + 1):
                block = Y00 * _real_cg_block(L1, L2, L3)
                if np.any(block):
                    blocks[(L1, L2, L3)] = block
    return CouplingTable(l_max, blocks, "cg")


def min_oracle_resolution(l_max: int) -> tuple[int, int]:
    """Smallest ``(r_phi, r_theta)`` integrating triple products up to ``l_max`` exactly."""
    return 3 * l_max + 1, -(-(3 * l_max + 1) // 2)


@functools.lru_cache(maxsize=None)
def gaunt_table(l_max: int, oracle_resolution: Optional[Union[int, tuple]] = None) -> GauntTable:
    """Gaunt coefficients ``int Y1 Y2 Y3 dOmega`` by exact product quadrature.

    ``oracle_resolution`` is ``(r_phi, r_theta)`` or a single int used for both;
    by default the minimal exact resolution is used.
    """
    _check_degree(l_max)
    need_phi, need_theta = min_oracle_resolution(l_max)
    if oracle_resolution is None:
        r_phi, r_theta = need_phi, need_theta
    elif isinstance(oracle_resolution, (int, np.integer)):
        r_phi = r_theta = int(oracle_resolution)
    else:
        r_phi, r_theta = (int(v) for v in oracle_resolution)
    if r_phi < need_phi or r_theta < need_theta:
        raise ValueError(
            f"oracle resolution ({r_phi}, {r_theta}) too coarse for l_max={l_max}; "
            f"need at least ({need_phi}, {need_theta})"
        )
    dirs, weights = _product_quadrature(r_phi, r_theta)
    Y = spherical_harmonics(dirs, l_max)  # (N, K)
    K = Y.shape[1]
    Yw = Y * weights[:, None]
    dense = np.empty((K, K, K))
    for a in range(K):
        dense[a] = (Yw * Y[:, a : a + 1]).T @ Y
    dense[np.abs(dense) < ZERO_THRESHOLD] = 0.0
    blocks = {}
    for L1 in range(l_max + 1):
        for L2 in range(l_max + 1):
            for L3 in range(abs(L1 - L2), min(L1 + L2, l_max) + 1):
                if (L1 + L2 + L3) % 2:
                    continue
                block = dense[degree_slice(L1), degree_slice(L2), degree_slice(L3)].copy()
                if np.any(block):
                    blocks[(L1, L2, L3)] = block
    return CouplingTable(l_max, blocks, "gaunt")


def _product_quadrature(r_phi: int, r_theta: int):
    """Gauss-Legendre in cos(theta) times uniform longitude; returns (dirs, weights)."""
    z, wz = np.polynomial.legendre.leggauss(r_theta)
    phi = 2 * np.pi * np.arange(r_phi) / r_phi
    sin_t = np.sqrt(1 - z * z)
    dirs = np.stack(
        [
            np.cos(phi)[:, None] * sin_t[None, :],
            np.sin(phi)[:, None] * sin_t[None, :],
            np.broadcast_to(z[None, :], (r_phi, r_theta)),
        ],
        -1,
    ).reshape(-1, 3)
    weights = (np.full(r_phi, 2 * np.pi / r_phi)[:, None] * wz[None, :]).reshape(-1)
    return dirs, weights


def cg_tensor_product(
    f: IrrepsFeature, g: IrrepsFeature, l_out: int, table: CouplingTable
) -> IrrepsFeature:
    """Channel-wise coupled product ``h_{L3 m3} = sum C f_{L1 m1} g_{L2 m2}``.

    All ``(L1, L2)`` paths present in ``table`` contribute; degrees above
    ``l_out`` are discarded. A single-channel operand broadcasts against the other.
    """
    need = max(f.l_max, g.l_max, l_out)
    if need > table.l_max:
        raise IrrepsError(f"table built for l_max={table.l_max}, request needs {need}")
    dtype = np.result_type(f.data, g.data)
    T = table.dense(f.l_max, g.l_max, l_out, dtype)
    Kf, Kg, Ko = T.shape
    pair = f.data[..., :, None, :] * g.data[..., None, :, :]  # (..., Kf, Kg, C)
    batch = pair.shape[:-3]
    C = pair.shape[-1]
    pair = pair.reshape(*batch, Kf * Kg, C)
    out = T.reshape(Kf * Kg, Ko).T @ pair
    return IrrepsFeature(out, l_out)
