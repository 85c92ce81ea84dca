import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rel_err, unit_vectors
from equicheck.blocks import (
    AttentionSpec,
    AttentionWeights,
    EdgeDegreeWeights,
    EdgeFrames,
    FFNWeights,
    align_matrix,
    atom_embedding,
    edge_degree_embedding,
    energy_head,
    feed_forward,
    force_head,
    graph_attention,
    smooth_softmax,
)
from equicheck.irreps import IrrepsError, IrrepsFeature, quaternion_to_matrix, random_rotation, rotate_feature, wigner_d
from equicheck.layers import envelope
from equicheck.s2grid import make_grid, product_resolution

L_MAX, M_MAX, C = 4, 2, 6


def cluster(rng, n=5, scale=1.5):
    pos = rng.uniform(-1, 1, (n, 3)) * scale
    src, dst = np.nonzero(~np.eye(n, dtype=bool))
    return pos, src, dst


def frames_for(pos, src, dst, l_max=L_MAX, m_max=M_MAX):
    return EdgeFrames.build(src, dst, pos[src] - pos[dst], len(pos), l_max, m_max)


def attention(rng, activation, c_out=None, res=None, **kw):
    res = res or product_resolution(L_MAX, M_MAX)
    grid = None if activation == "gate" else make_grid(*res, L_MAX, M_MAX)
    spec = AttentionSpec(L_MAX, M_MAX, C, activation=activation, grid=grid, c_out=c_out, **kw)
    return AttentionWeights.init(rng, spec)


def feature(rng, n, channels=C, l_max=L_MAX):
    return IrrepsFeature(rng.standard_normal((n, (l_max + 1) ** 2, channels)).astype(np.float32), l_max)


# --------------------------------------------------------------------------
# edge frames


@given(st.integers(0, 2**31))
def test_align_maps_edge_to_z(seed):
    v = unit_vectors(np.random.default_rng(seed), 16) * 3.0
    R = align_matrix(v)
    np.testing.assert_allclose(np.einsum("eij,ej->ei", R, v / 3.0), np.tile([0, 0, 1.0], (16, 1)), atol=1e-6)
    np.testing.assert_allclose(R @ np.swapaxes(R, -1, -2), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0)


def test_align_degenerate_edges():
    np.testing.assert_allclose(align_matrix([0, 0, 2.0]), np.eye(3), atol=1e-15)
    flip = align_matrix([0, 0, -1.0])
    assert np.isfinite(flip).all()
    # documented fallback: half turn about y
    np.testing.assert_allclose(flip, np.diag([-1.0, 1.0, -1.0]), atol=1e-15)
    with pytest.raises(IrrepsError):
        align_matrix([0, 0, 0.0])


def test_frames_reject_dangling_edges():
    with pytest.raises(IrrepsError):
        EdgeFrames.build([0, 3], [1, 0], np.ones((2, 3)), 3, 2, 1)


# --------------------------------------------------------------------------
# smooth softmax


def test_softmax_single_neighbour():
    r = np.array([2.0])
    u = envelope(r, 5.0)[0]
    a = smooth_softmax(np.array([0.3]), r, 5.0)
    assert a[0] == pytest.approx(u / (u + 1e-8), rel=1e-12)
    assert smooth_softmax(np.array([0.3]), np.array([5.0]), 5.0)[0] == 0.0


def test_softmax_symmetric_pair():
    a = smooth_softmax(np.array([1.0, 1.0]), np.array([2.0, 2.0]), 5.0)
    assert a[0] == a[1] == pytest.approx(0.5)


@given(st.integers(0, 2**31), st.booleans())
def test_softmax_weights_bounded(seed, inside):
    rng = np.random.default_rng(seed)
    n = 12
    index = rng.integers(0, 4, n)
    z = rng.standard_normal((n, 3)) * 5
    r = rng.uniform(0.1, 6.0, n)
    a = smooth_softmax(z, r, 5.0, index=index, n_groups=4, envelope_in_softmax=inside)
    assert np.all(a >= 0) and np.all(a < 1)
    sums = np.zeros((4, 3))
    np.add.at(sums, index, a)
    assert np.all(sums <= 1.0)


# --------------------------------------------------------------------------
# graph attention


# the pointwise S2 nonlinearity is only band-limited approximately, so it gets a fine grid
@pytest.mark.parametrize("activation,res", [("gate", None), ("swiglu_s2", None), ("s2", (40, 40))])
def test_attention_equivariance(rng, activation, res):
    w = attention(rng, activation, res=res)
    pos, src, dst = cluster(rng)
    x = feature(rng, len(pos))
    out = graph_attention(x, frames_for(pos, src, dst), w)
    for s in range(8):
        rot = random_rotation(s, L_MAX)
        pr = pos @ rot.matrix.T
        got = graph_attention(rotate_feature(x, rot), frames_for(pr, src, dst), w)
        assert rel_err(got.data, rotate_feature(out, rot).data) <= 1e-5


def test_attention_translation_bit_identical(rng):
    w = attention(rng, "swiglu_s2")
    pos, src, dst = cluster(rng)
    pos = np.round(pos * 2**16) / 2**16
    x = feature(rng, len(pos))
    a = graph_attention(x, frames_for(pos, src, dst), w).data
    b = graph_attention(x, frames_for(pos + [2.5, -1.25, 0.5], src, dst), w).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("activation", ["gate", "swiglu_s2"])
def test_attention_fused_matches_reference_path(rng, activation):
    w = attention(rng, activation)
    pos, src, dst = cluster(rng)
    x = feature(rng, len(pos))
    fr = frames_for(pos, src, dst)
    np.testing.assert_allclose(
        graph_attention(x, fr, w, fused=True).data, graph_attention(x, fr, w, fused=False).data, atol=1e-6
    )


def test_attention_isolated_node(rng):
    w = attention(rng, "gate")
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [9.0, 9, 9]])
    fr = frames_for(pos, np.array([0, 1]), np.array([1, 0]))
    out = graph_attention(feature(rng, 3), fr, w).data
    # no messages: only the output bias on the scalars survives
    np.testing.assert_array_equal(out[2, 0], w.out.bias)
    assert not out[2, 1:].any()


def test_attention_no_edges(rng):
    w = attention(rng, "gate")
    fr = EdgeFrames.build(np.zeros(0), np.zeros(0), np.zeros((0, 3)), 2, L_MAX, M_MAX)
    assert graph_attention(feature(rng, 2), fr, w).data.shape == (2, 25, C)


def test_attention_spec_validation():
    with pytest.raises(IrrepsError):
        AttentionSpec(2, 1, 4, activation="relu")
    with pytest.raises(IrrepsError):
        AttentionSpec(2, 1, 4, activation="s2")


def test_heads_preserve_channel_count(rng):
    w = attention(rng, "gate", heads=4, d_value=3)
    assert w.so2_second.c_out == 12 and w.out.weight.shape[1] == 12


# --------------------------------------------------------------------------
# feedforward


def zero_biases(w: FFNWeights) -> FFNWeights:
    return dataclasses.replace(
        w,
        lin_in=dataclasses.replace(w.lin_in, bias=None),
        lin_out=dataclasses.replace(w.lin_out, bias=None),
        gate_b=None if w.gate_b is None else np.zeros_like(w.gate_b),
    )


@pytest.mark.parametrize("activation", ["gate", "s2", "swiglu_s2"])
def test_ffn_zero_in_zero_out(rng, activation):
    w = zero_biases(FFNWeights.init(rng, activation, 3, 4, 8))
    out = feed_forward(IrrepsFeature.zeros(3, 4, (2,)), w, make_grid(14, 14, 3))
    assert not out.data.any()


@pytest.mark.parametrize("activation,grid", [("gate", None), ("swiglu_s2", (13, 7)), ("s2", (40, 40))])
def test_ffn_equivariance(rng, activation, grid):
    w = FFNWeights.init(rng, activation, 4, C, 16)
    g = None if grid is None else make_grid(*grid, 4)
    x = feature(rng, 3)
    out = feed_forward(x, w, g)
    for s in range(8):
        rot = random_rotation(s, 4)
        assert rel_err(feed_forward(rotate_feature(x, rot), w, g).data, rotate_feature(out, rot).data) <= 1e-5


def test_ffn_width(rng):
    a = FFNWeights.init(rng, "swiglu_s2", 2, 4, 8)
    b = FFNWeights.init(rng, "swiglu_s2", 2, 4, 16)
    assert b.hidden == 2 * a.hidden
    assert b.lin_in.weight.shape[2] == 2 * a.lin_in.weight.shape[2]
    x = feature(rng, 2, 4, 2)
    grid = make_grid(7, 4, 2)
    assert feed_forward(x, a, grid).data.shape == feed_forward(x, b, grid).data.shape == x.data.shape


def test_ffn_needs_grid(rng):
    with pytest.raises(IrrepsError):
        feed_forward(feature(rng, 1, 4, 2), FFNWeights.init(rng, "s2", 2, 4, 4))


# --------------------------------------------------------------------------
# embeddings


def test_atom_embedding(rng):
    table = rng.standard_normal((10, 4)).astype(np.float32)
    e = atom_embedding([6, 1, 6], table, 2)
    np.testing.assert_array_equal(e.data[0], e.data[2])
    assert not e.data[:, 1:].any()
    rot = random_rotation(0, 2)
    np.testing.assert_allclose(rotate_feature(e, rot).data, e.data, atol=1e-7)
    with pytest.raises(IrrepsError):
        atom_embedding([0], table, 2)
    with pytest.raises(IrrepsError):
        atom_embedding([10], table, 2)


def edge_weights(rng):
    return EdgeDegreeWeights.init(rng, L_MAX, M_MAX, C, 5.0)


def test_edge_degree_isolated_atom(rng):
    fr = EdgeFrames.build(np.zeros(0), np.zeros(0), np.zeros((0, 3)), 1, L_MAX, M_MAX)
    assert not edge_degree_embedding(fr, edge_weights(rng)).data.any()


def test_edge_degree_equivariance(rng):
    w = edge_weights(rng)
    pos, src, dst = cluster(rng)
    out = edge_degree_embedding(frames_for(pos, src, dst), w)
    for s in range(8):
        rot = random_rotation(s, L_MAX)
        got = edge_degree_embedding(frames_for(pos @ rot.matrix.T, src, dst), w)
        assert rel_err(got.data, rotate_feature(out, rot).data) <= 1e-5


def test_edge_degree_mirror_pair(rng):
    # centre 0 with neighbours on +-x: a half turn about z swaps them
    pos = np.array([[0.0, 0, 0], [1.3, 0, 0], [-1.3, 0, 0]])
    fr = frames_for(pos, np.array([1, 2]), np.array([0, 0]))
    f = edge_degree_embedding(fr, edge_weights(rng))
    half = wigner_d(quaternion_to_matrix(np.array([0.0, 0, 0, 1])), L_MAX)
    np.testing.assert_allclose(rotate_feature(f, half).data[0], f.data[0], atol=1e-6)


# --------------------------------------------------------------------------
# heads


def test_heads(rng):
    pos, src, dst = cluster(rng, 4)
    x = feature(rng, 4)
    head = FFNWeights.init(rng, "gate", L_MAX, C, 8, c_out=1)
    assert np.isfinite(energy_head(x, head))
    with pytest.raises(IrrepsError):
        energy_head(IrrepsFeature.zeros(L_MAX, C, (0,)), head)
    fr = frames_for(pos, src, dst)
    f = force_head(x, fr, attention(rng, "gate", c_out=1))
    assert f.shape == (4, 3)
    with pytest.raises(IrrepsError):
        force_head(x, fr, attention(rng, "gate"))
