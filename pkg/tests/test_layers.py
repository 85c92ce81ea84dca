import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rel_err
from equicheck.irreps import IrrepsError, IrrepsFeature, random_rotation, rotate_feature
from equicheck.layers import (
    LAYER_NORMS,
    LinearWeights,
    NormParams,
    SO2Weights,
    envelope,
    fuse_permutation,
    gate_activation,
    merged_layer_norm,
    order_groups,
    order_major_index,
    permutation_counter,
    rotation_z_wigner_block,
    s2_activation,
    scalar_layer_norm,
    silu,
    so2_linear,
    so2_linear_fused,
    so3_linear,
    swiglu_s2,
)
from equicheck.s2grid import GridFeature, from_sphere, grid_tensor_product, make_grid, to_sphere


def feature(rng, l_max, channels=4, batch=(), dtype=np.float32):
    return IrrepsFeature(rng.standard_normal((*batch, (l_max + 1) ** 2, channels)).astype(dtype), l_max)


def equivariance_error(op, l_max, trials=32, channels=4, seed=0):
    errs = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        x = feature(rng, l_max, channels)
        rot = random_rotation(int(rng.integers(2**31)), l_max)
        ref = rotate_feature(op(x), rot)
        errs.append(rel_err(op(rotate_feature(x, rot)).data, ref.data))
    return float(np.mean(errs))


# --------------------------------------------------------------------------
# envelope


def test_envelope_endpoints():
    assert envelope(0.0, 5.0) == 1.0
    assert envelope(5.0, 5.0) == 0.0
    assert envelope(7.0, 5.0) == 0.0


def one_sided_derivatives(p, h):
    u = envelope(np.array([1 - 2 * h, 1 - h, 1.0]), 1.0, p)
    return (u[2] - u[0]) / (2 * h), (u[2] - 2 * u[1] + u[0]) / h**2


@pytest.mark.parametrize("p", [3, 5, 6])
def test_envelope_smooth_at_cutoff(p):
    # u ~ c (1 - d)^3 near the cutoff: slope estimates fall as h^2, curvature as h
    f1, s1 = one_sided_derivatives(p, 1e-4)
    f2, s2 = one_sided_derivatives(p, 5e-5)
    assert abs(f1) < 1e-4 and abs(s1) < 1.0
    assert f1 / f2 == pytest.approx(4.0, rel=1e-3)
    assert s1 / s2 == pytest.approx(2.0, rel=1e-3)


def test_envelope_frozen_midpoint():
    # 1 - 21/32 + 35/64 - 15/128 for p = 5 at d = 1/2
    assert envelope(0.5, 1.0, 5) == pytest.approx(1 - 21 / 32 + 35 / 64 - 15 / 128, abs=1e-15)


# --------------------------------------------------------------------------
# gate


def test_gate_saturated(rng):
    x = feature(rng, 3, dtype=np.float64)
    out = gate_activation(x, np.full((3, 4), 50.0))
    np.testing.assert_allclose(out.data[1:], x.data[1:], atol=1e-6)
    np.testing.assert_allclose(out.data[0], silu(x.data[0]))


def test_gate_zero_input():
    out = gate_activation(IrrepsFeature.zeros(2, 3), np.zeros((2, 3)))
    assert not out.data.any()


def test_gate_shape_check(rng):
    with pytest.raises(IrrepsError):
        gate_activation(feature(rng, 2), np.zeros((3, 4)))


def test_gate_equivariance():
    gates = np.random.default_rng(9).standard_normal((4, 4))
    assert equivariance_error(lambda x: gate_activation(x, gates), 4) <= 1e-5


# --------------------------------------------------------------------------
# S2 activation


def test_s2_zero():
    assert not s2_activation(IrrepsFeature.zeros(2, 2), make_grid(12, 12, 2)).data.any()


def test_s2_equivariance_decays_with_resolution():
    # SiLU is not band-limited, so the error only decays with the grid;
    # unit-variance inputs sit on the broken side at (6, 6)
    errs = [
        equivariance_error(lambda x: s2_activation(x, make_grid(n, n, 2)), 2)
        for n in (6, 8, 12, 16, 24)
    ]
    assert errs[0] >= 1e-3
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-5


def test_s2_pointwise_derivative():
    grid = make_grid(5, 3, 1)
    vals = np.random.default_rng(0).standard_normal((5, 3, 1))
    eps = 1e-6
    bumped = vals.copy()
    bumped[2, 1, 0] += eps
    a, b = silu(vals), silu(bumped)
    s = 1 / (1 + math.exp(-vals[2, 1, 0]))
    deriv = s * (1 + vals[2, 1, 0] * (1 - s))
    assert (b - a)[2, 1, 0] == pytest.approx(eps * deriv, rel=1e-4)
    assert np.count_nonzero(b - a) == 1


# --------------------------------------------------------------------------
# SwiGLU-S2


def test_swiglu_zero_gate_and_unit_grid(rng):
    grid = make_grid(9, 6, 3)
    x1 = to_sphere(feature(rng, 3, dtype=np.float64), grid)
    x2 = to_sphere(feature(rng, 3, dtype=np.float64), grid)
    np.testing.assert_allclose(swiglu_s2(np.zeros(4), x1, x2).data, 0.5 * x1.data * x2.data)
    s = rng.standard_normal(4)
    ones = x1.with_data(np.ones_like(x1.data))
    np.testing.assert_allclose(swiglu_s2(s, x1, ones).data, x1.data / (1 + np.exp(-s)))


def test_swiglu_validation(rng):
    g1, g2 = make_grid(9, 6, 3), make_grid(10, 6, 3)
    a = to_sphere(feature(rng, 3), g1)
    with pytest.raises(IrrepsError):
        swiglu_s2(np.zeros(4), a, to_sphere(feature(rng, 3), g2))
    with pytest.raises(IrrepsError):
        swiglu_s2(np.zeros(3), a, a)


def swiglu_pipeline(grid, l_max):
    def op(x):
        g = to_sphere(x, grid)
        return from_sphere(swiglu_s2(np.zeros(x.channels), g, g), l_max)

    return op


@pytest.mark.parametrize("grid,strict", [((20, 20), True), ((18, 18), False)])
def test_swiglu_pipeline_equivariance(grid, strict):
    err = equivariance_error(swiglu_pipeline(make_grid(*grid, 6), 6), 6)
    assert err <= 1e-5 if strict else err >= 1e-3


def test_swiglu_is_self_tensor_product(rng):
    grid = make_grid(13, 7, 4)
    x = feature(rng, 4, dtype=np.float64)
    g = to_sphere(x, grid)
    got = from_sphere(swiglu_s2(np.full(4, 60.0), g, g), 4)
    want = grid_tensor_product(x, x, grid, 4)
    assert rel_err(got.data, want.data) <= 1e-5


# --------------------------------------------------------------------------
# layer norms


def merged_sigma(x):
    s = x.data[..., 0, :]
    terms = [((s - s.mean(-1, keepdims=True)) ** 2).mean(-1)]
    for L in range(1, x.l_max + 1):
        terms.append((x.degree(L) ** 2).mean((-2, -1)))
    return np.sqrt(np.mean(terms, 0))


def test_norm_zero_input():
    for norm in LAYER_NORMS.values():
        out = norm(IrrepsFeature.zeros(3, 4), NormParams.identity(3, 4))
        assert np.isfinite(out.data).all() and not out.data.any()


@pytest.mark.parametrize("l_max", [0, 2, 4, 6])
@given(alpha=st.floats(1e-3, 1e3), seed=st.integers(0, 2**31))
def test_merged_scale_invariance_and_unit_rms(l_max, alpha, seed):
    rng = np.random.default_rng(seed)
    x = feature(rng, l_max, 8, (3,))
    p = NormParams.identity(l_max, 8)
    a = merged_layer_norm(x, p).data
    b = merged_layer_norm(x.with_data(x.data * np.float32(alpha)), p).data
    assert np.abs(a - b).max() <= 1e-5
    np.testing.assert_allclose(merged_sigma(x.with_data(a)), 1.0, atol=1e-5)


def test_degreewise_unit_rms(rng):
    x = feature(rng, 3, 6, dtype=np.float64)
    out = LAYER_NORMS["degreewise"](x, NormParams.identity(3, 6))
    for L in range(1, 4):
        assert np.sqrt((out.degree(L) ** 2).mean()) == pytest.approx(1.0)


def test_norms_agree_when_trivial(rng):
    x0 = feature(rng, 0, 5)
    p0 = NormParams.identity(0, 5)
    np.testing.assert_array_equal(
        LAYER_NORMS["separable"](x0, p0).data, LAYER_NORMS["merged"](x0, p0).data
    )
    xs = IrrepsFeature.from_scalars(rng.standard_normal((2, 5)).astype(np.float32), 3)
    p = NormParams.identity(3, 5)
    sep = LAYER_NORMS["separable"](xs, p).data
    np.testing.assert_allclose(LAYER_NORMS["degreewise"](xs, p).data, sep, atol=1e-6)
    # the merged RMS averages over all l_max + 1 degrees, three of them empty here
    np.testing.assert_allclose(LAYER_NORMS["merged"](xs, p).data, 2.0 * sep, atol=1e-5)


def test_affine_placement(rng):
    x = feature(rng, 2, 3, dtype=np.float64)
    gamma = rng.uniform(0.5, 2, (3, 3))
    beta = rng.standard_normal(3)
    base = merged_layer_norm(x, NormParams(np.ones((3, 3)), np.zeros(3))).data
    out = merged_layer_norm(x, NormParams(gamma, beta)).data
    np.testing.assert_allclose(out[0], gamma[0] * base[0] + beta)
    np.testing.assert_allclose(out[1:4], gamma[1] * base[1:4])
    np.testing.assert_allclose(out[4:], gamma[2] * base[4:])


@pytest.mark.parametrize("name", sorted(LAYER_NORMS))
def test_norms_equivariant(name):
    rng = np.random.default_rng(3)
    p = NormParams(rng.uniform(0.5, 1.5, (5, 4)).astype(np.float32), rng.standard_normal(4).astype(np.float32))
    assert equivariance_error(lambda x: LAYER_NORMS[name](x, p), 4) <= 1e-5


def test_scalar_layer_norm(rng):
    y = scalar_layer_norm(rng.standard_normal((5, 8)) * 3 + 1, eps=0)
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1)


# --------------------------------------------------------------------------
# SO(3) linear


def test_so3_linear_equivariant(rng):
    w = LinearWeights(rng.standard_normal((4, 4, 6)).astype(np.float32), rng.standard_normal(6).astype(np.float32))
    assert equivariance_error(lambda x: so3_linear(x, w), 3) <= 1e-5
    out = so3_linear(feature(rng, 3), w)
    assert out.channels == 6
    with pytest.raises(IrrepsError):
        so3_linear(feature(rng, 3, 5), w)


# --------------------------------------------------------------------------
# SO(2) layers


def test_order_major_layout():
    idx = order_major_index(2, 1)
    # m=-1: L=1,2 -> rows 1, 5; m=0: L=0,1,2 -> 0, 2, 6; m=1: 3, 7
    assert idx.tolist() == [1, 5, 0, 2, 6, 3, 7]
    g = order_groups(2, 1)
    assert g[0] == slice(2, 5) and g[1] == slice(5, 7)
    assert sorted(order_major_index(4).tolist()) == list(range(25))


def test_so2_identity_passthrough(rng):
    x = feature(rng, 3, 2)
    out, extra = so2_linear(x, SO2Weights.identity(3, 1, 2))
    keep = np.abs(np.concatenate([np.arange(-L, L + 1) for L in range(4)])) <= 1
    np.testing.assert_array_equal(out.data[keep], x.data[keep])
    assert not out.data[~keep].any()
    assert extra.shape == (0,)


def test_so2_quarter_turn():
    w = SO2Weights(1, 1, 1, 1, 1, np.eye(2, dtype=np.float32), (np.zeros((1, 1), np.float32),), (np.ones((1, 1), np.float32),))
    x = IrrepsFeature(np.array([[0.0], [2.0], [0.0], [3.0]], np.float32), 1)  # m=-1 -> 2, m=+1 -> 3
    out, _ = so2_linear(x, w)
    # (+m, -m) = (3, 2) maps to (-2, 3)
    assert out.data[3, 0] == -2.0 and out.data[1, 0] == 3.0


@given(st.floats(-math.pi, math.pi), st.integers(0, 2**31))
def test_so2_commutes_with_z_rotation(angle, seed):
    rng = np.random.default_rng(seed)
    w = SO2Weights.init(rng, 3, 3, 2, 3, 3, bias=False)
    x = feature(rng, 3, 3, dtype=np.float64)
    Dz = rotation_z_wigner_block(3, angle)
    lhs, _ = so2_linear(x.with_data(Dz @ x.data), w)
    rhs, _ = so2_linear(x, w)
    assert rel_err(lhs.data, Dz @ rhs.data) <= 1e-5


def test_so2_extra_scalars_invariant(rng):
    w = SO2Weights.init(rng, 2, 2, 2, 2, 2, extra=5)
    x = feature(rng, 2, 2, dtype=np.float64)
    _, e1 = so2_linear(x, w)
    _, e2 = so2_linear(x.with_data(rotation_z_wigner_block(2, 0.7) @ x.data), w)
    assert e1.shape == (5,)
    np.testing.assert_allclose(e1, e2, atol=1e-6)


def test_so2_bias_only_on_scalars(rng):
    w = SO2Weights.init(rng, 2, 2, 1, 3, 3, extra=2)
    out, extra = so2_linear(IrrepsFeature.zeros(2, 3), w)
    assert out.data[0].any() and not out.data[1:].any()
    assert extra.any()


def test_so2_shape_validation(rng):
    with pytest.raises(IrrepsError):
        SO2Weights(2, 2, 1, 1, 1, np.eye(2), (np.eye(2),), (np.eye(2),))


# --------------------------------------------------------------------------
# fused permutation


def test_fused_bit_identical_and_counter(rng):
    l_max, m_max = 4, 2
    rot = fuse_permutation(random_rotation(0, l_max, size=64), m_max)
    w = SO2Weights.init(rng, l_max, l_max, m_max, 4, 4)
    x = rng.standard_normal((64, 25, 4)).astype(np.float32)
    dense = rot.dense(np.float32)
    c0 = permutation_counter["count"]
    unfused, _ = so2_linear(IrrepsFeature(dense @ x, l_max), w)
    c1 = permutation_counter["count"]
    fused, _ = so2_linear_fused(rot.permuted.astype(np.float32) @ x, w)
    c2 = permutation_counter["count"]
    assert c1 - c0 == 2 and c2 == c1
    np.testing.assert_array_equal(unfused.data[:, order_major_index(l_max, m_max)], fused)


def test_fuse_idempotent():
    rot = random_rotation(1, 3)
    a = fuse_permutation(rot, 2)
    b = fuse_permutation(a, 2)
    np.testing.assert_array_equal(a.permuted, b.permuted)
