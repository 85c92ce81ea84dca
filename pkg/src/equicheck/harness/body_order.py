"""Body-order probes: can a random-weight network separate two neighbourhoods?

Each environment is a star graph: neighbours sit at the given offsets around a
central atom and send messages only to it. The probe is one pre-norm attention
block followed by ``num_ffns`` pre-norm feedforward blocks without grid linears,
read out as a random linear functional of the central atom's scalar channels.
The norm is the separable one: scalars are scaled by scalar statistics only, so
angular information cannot reach them through the normaliser and any
separation is due to the activation. A structural
inability to separate two environments shows up as equal outputs for every
weight draw, so random weights stand in for training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..blocks import (
    AttentionSpec,
    AttentionWeights,
    EdgeFrames,
    FFNWeights,
    atom_embedding,
    feed_forward,
    graph_attention,
)
from ..layers import NormParams, separable_layer_norm
from ..irreps import IrrepsError
from ..s2grid import make_grid, product_resolution

DISTINGUISHABLE = 1e-3
INDISTINGUISHABLE = 1e-5
CARBON = 6


@dataclass(frozen=True)
class CounterexamplePair:
    """Two neighbourhoods (offsets from a central atom, in angstrom)."""

    name: str
    env_a: np.ndarray
    env_b: np.ndarray
    body_order: int = 3

    def __post_init__(self):
        a = np.asarray(self.env_a, dtype=np.float64).reshape(-1, 3)
        b = np.asarray(self.env_b, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "env_a", a)
        object.__setattr__(self, "env_b", b)
        da = np.sort(np.linalg.norm(a, axis=1))
        db = np.sort(np.linalg.norm(b, axis=1))
        if len(da) != len(db) or np.max(np.abs(da - db), initial=0.0) > 1e-9:
            raise IrrepsError(f"pair {self.name!r}: environments differ in their distance multisets")
        if np.any(da == 0):
            raise IrrepsError(f"pair {self.name!r}: a neighbour coincides with the centre")

    @classmethod
    def from_dict(cls, d: dict) -> "CounterexamplePair":
        return cls(d["name"], d["env_a"], d["env_b"], int(d.get("body_order", 3)))

    @classmethod
    def from_json(cls, path) -> "CounterexamplePair":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "body_order": self.body_order,
            "env_a": self.env_a.tolist(),
            "env_b": self.env_b.tolist(),
        }


def angle_pair(angle_a: float = 90.0, angle_b: float = 120.0) -> CounterexamplePair:
    """Two unit-distance neighbours at ``angle_a`` versus ``angle_b`` degrees."""

    def env(deg):
        t = np.deg2rad(deg)
        return [[1.0, 0.0, 0.0], [np.cos(t), np.sin(t), 0.0]]

    return CounterexamplePair(f"angle-{angle_a:g}-vs-{angle_b:g}", env(angle_a), env(angle_b), 3)


def identical_pair() -> CounterexamplePair:
    e = [[1.0, 0.0, 0.0], [0.0, 1.2, 0.3], [-0.4, 0.2, 1.1]]
    return CounterexamplePair("identical", e, e, 0)


@dataclass(frozen=True)
class ProbeSpec:
    l_max: int = 4
    m_max: int = 2
    channels: int = 16
    r_cut: float = 5.0


def _probe_energy(env, activation, num_ffns, rng_seed, spec: ProbeSpec) -> float:
    n = len(env) + 1
    pos = np.vstack([np.zeros(3), env])
    src = np.arange(1, n)
    dst = np.zeros(n - 1, dtype=np.intp)
    frames = EdgeFrames.build(src, dst, pos[src] - pos[dst], n, spec.l_max, spec.m_max)

    rng = np.random.default_rng(rng_seed)
    table = rng.uniform(-1, 1, (CARBON + 1, spec.channels)).astype(np.float32)
    attn_grid = None if activation == "gate" else make_grid(*product_resolution(spec.l_max, spec.m_max), spec.l_max, spec.m_max)
    ffn_grid = None if activation == "gate" else make_grid(*product_resolution(spec.l_max), spec.l_max)
    aspec = AttentionSpec(spec.l_max, spec.m_max, spec.channels, activation=activation, grid=attn_grid, r_cut=spec.r_cut)
    attn = AttentionWeights.init(rng, aspec)
    ffns = [
        FFNWeights.init(rng, activation, spec.l_max, spec.channels, spec.channels, grid_linear=False)
        for _ in range(num_ffns)
    ]
    readout = rng.standard_normal(spec.channels)
    norm = NormParams.identity(spec.l_max, spec.channels)

    x = atom_embedding(np.full(n, CARBON), table, spec.l_max)
    x = x.with_data(x.data + graph_attention(separable_layer_norm(x, norm), frames, attn).data)
    for w in ffns:
        x = x.with_data(x.data + feed_forward(separable_layer_norm(x, norm), w, ffn_grid).data)
    return float(x.data[0, 0, :].astype(np.float64) @ readout)


def body_order_probe(
    activation: str,
    num_ffns: int,
    pair: CounterexamplePair,
    seeds: int = 16,
    spec: Optional[ProbeSpec] = None,
    seed: int = 0,
) -> dict:
    """Separation ``|E_A - E_B| / (|E_A| + |E_B| + 1e-12)`` over random-weight draws.

    Verdict: distinguishable if the median separation exceeds 1e-3,
    indistinguishable if the maximum stays below 1e-5, inconclusive otherwise.
    """
    if not 1 <= num_ffns <= 3:
        raise IrrepsError("num_ffns must be 1, 2 or 3")
    spec = spec or ProbeSpec()
    seps = []
    for s in range(seeds):
        ea = _probe_energy(pair.env_a, activation, num_ffns, [seed, s], spec)
        eb = _probe_energy(pair.env_b, activation, num_ffns, [seed, s], spec)
        seps.append(abs(ea - eb) / (abs(ea) + abs(eb) + 1e-12))
    seps = np.asarray(seps)
    if np.median(seps) > DISTINGUISHABLE:
        verdict = "distinguishable"
    elif seps.max() < INDISTINGUISHABLE:
        verdict = "indistinguishable"
    else:
        verdict = "inconclusive"
    return {
        "pair": pair.name,
        "activation": activation,
        "num_ffns": num_ffns,
        "separations": seps.tolist(),
        "median": float(np.median(seps)),
        "max": float(seps.max()),
        "verdict": verdict,
    }
