"""Graph construction, model configuration, weights and the full forward pass."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .blocks import (
    ACTIVATIONS,
    MAX_ATOMIC_NUMBER,
    AttentionSpec,
    AttentionWeights,
    EdgeDegreeWeights,
    EdgeFrames,
    FFNWeights,
    atom_embedding,
    edge_degree_embedding,
    energy_head,
    feed_forward,
    force_head,
    graph_attention,
)
from .irreps import IrrepsError, IrrepsFeature
from .layers import LAYER_NORMS, NormParams
from .s2grid import make_grid, product_resolution

# --------------------------------------------------------------------------
# elements and structures

SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ATOMIC_NUMBERS = {s: z for z, s in enumerate(SYMBOLS) if z}


class ParseError(ValueError):
    """Malformed structure, config or weight file."""


@dataclass
class Structure:
    species: np.ndarray
    positions: np.ndarray
    comment: str = ""


def read_xyz(source) -> list[Structure]:
    """Parse (extended) XYZ text: count line, comment line, ``symbol x y z ...`` rows.

    ``source`` is a path or the text itself. Extra columns are ignored.
    """
    text = Path(source).read_text() if isinstance(source, Path) or (
        isinstance(source, str) and "\n" not in source and Path(source).exists()
    ) else str(source)
    lines = text.splitlines()
    frames, i = [], 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].split()[0])
        except ValueError as exc:
            raise ParseError(f"line {i + 1}: expected an atom count") from exc
        if i + 2 + n > len(lines):
            raise ParseError(f"line {i + 1}: frame declares {n} atoms but the file ends early")
        comment = lines[i + 1]
        species, pos = [], []
        for k, row in enumerate(lines[i + 2 : i + 2 + n]):
            parts = row.split()
            if len(parts) < 4:
                raise ParseError(f"line {i + 3 + k}: expected 'symbol x y z'")
            sym = parts[0]
            if sym.isdigit():
                z = int(sym)
            elif sym.capitalize() in ATOMIC_NUMBERS:
                z = ATOMIC_NUMBERS[sym.capitalize()]
            else:
                raise ParseError(f"line {i + 3 + k}: unknown element {sym!r}")
            try:
                pos.append([float(v) for v in parts[1:4]])
            except ValueError as exc:
                raise ParseError(f"line {i + 3 + k}: bad coordinate") from exc
            species.append(z)
        frames.append(Structure(np.array(species, dtype=np.intp), np.array(pos).reshape(-1, 3), comment))
        i += 2 + n
    if not frames:
        raise ParseError("no structures found")
    return frames


def write_xyz(structures: Sequence[Structure]) -> str:
    out = io.StringIO()
    for s in structures:
        out.write(f"{len(s.species)}\n{s.comment}\n")
        for z, (x, y, w) in zip(s.species, s.positions):
            out.write(f"{SYMBOLS[int(z)]} {x:.10f} {y:.10f} {w:.10f}\n")
    return out.getvalue()


# --------------------------------------------------------------------------
# graphs


@dataclass(frozen=True)
class AtomGraph:
    positions: np.ndarray
    species: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    vec: np.ndarray  # positions[src] - positions[dst]
    dist: np.ndarray
    r_cut: float
    max_neighbors: Optional[int] = None

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def build_graph(positions, species, r_cut: float, max_neighbors: Optional[int] = None) -> AtomGraph:
    """Radius graph with edges ``src -> dst`` for every pair with ``0 < r <= r_cut``.

    With a cap, each destination keeps its ``max_neighbors`` nearest sources,
    ties going to the lower source index. Edges are ordered by destination,
    then by distance and relative vector, an order that depends only on the
    geometry and not on atom labels.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    z = np.asarray(species, dtype=np.intp).reshape(-1)
    if len(pos) == 0:
        raise IrrepsError("a graph needs at least one atom")
    if len(z) != len(pos):
        raise IrrepsError("species and positions have different lengths")
    if not np.all(np.isfinite(pos)):
        raise IrrepsError("positions contain NaN or infinite values")
    vec = pos[None, :, :] - pos[:, None, :]  # vec[dst, src]
    dist = np.linalg.norm(vec, axis=-1)
    dst, src = np.nonzero((dist > 0) & (dist <= r_cut))
    if max_neighbors is not None and max_neighbors >= 0:
        order = np.lexsort((src, dist[dst, src], dst))
        dst, src = dst[order], src[order]
        rank = np.arange(len(dst)) - np.searchsorted(dst, dst, side="left")
        keep = rank < max_neighbors
        dst, src = dst[keep], src[keep]
    v = vec[dst, src]
    d = dist[dst, src]
    order = np.lexsort((v[:, 2], v[:, 1], v[:, 0], d, dst))
    dst, src, v, d = dst[order], src[order], v[order], d[order]
    return AtomGraph(pos, z, src, dst, v, d, float(r_cut), max_neighbors)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyper-parameters.

    Grids default to the smallest exact ones for ``l_max`` (FFN) and for
    ``(l_max, m_max)`` (attention). ``max_neighbors = None`` means unlimited.
    """

    l_max: int = 4
    m_max: int = 2
    n_blocks: int = 2
    channels: int = 32
    d_attn_hidden: int = 8
    d_attn_alpha: int = 8
    d_attn_value: int = 8
    heads: int = 4
    d_ffn: int = 64
    attn_grid: Optional[tuple] = None
    ffn_grid: Optional[tuple] = None
    r_cut: float = 5.0
    max_neighbors: Optional[int] = None
    n_radial: int = 16
    d_edge: int = 32
    envelope_p: int = 5
    norm: str = "merged"
    activation: str = "swiglu_s2"
    attn_activation: Optional[str] = None
    envelope_in_softmax: bool = True
    final_norm: bool = True
    edge_norm: float = 8.0

    def __post_init__(self):
        if not 0 <= self.m_max:
            raise IrrepsError("m_max must be non-negative")
        if self.norm not in LAYER_NORMS:
            raise IrrepsError(f"norm must be one of {sorted(LAYER_NORMS)}")
        for a in (self.activation, self.attention_activation):
            if a not in ACTIVATIONS:
                raise IrrepsError(f"activation must be one of {ACTIVATIONS}, got {a!r}")
        if self.attn_grid is None:
            object.__setattr__(self, "attn_grid", product_resolution(self.l_max, self.m_max))
        if self.ffn_grid is None:
            object.__setattr__(self, "ffn_grid", product_resolution(self.l_max))
        object.__setattr__(self, "attn_grid", tuple(int(v) for v in self.attn_grid))
        object.__setattr__(self, "ffn_grid", tuple(int(v) for v in self.ffn_grid))

    @property
    def attention_activation(self) -> str:
        return self.activation if self.attn_activation is None else self.attn_activation

    def attention_spec(self, activation=None, c_out=None) -> AttentionSpec:
        act = activation or self.attention_activation
        grid = None if act == "gate" else make_grid(*self.attn_grid, self.l_max, self.m_max)
        return AttentionSpec(
            self.l_max,
            self.m_max,
            self.channels,
            self.heads,
            self.d_attn_alpha,
            self.d_attn_value,
            self.d_attn_hidden,
            c_out,
            act,
            grid,
            self.r_cut,
            self.envelope_p,
            self.envelope_in_softmax,
        )

    def ffn_grid_spec(self):
        return None if self.activation == "gate" else make_grid(*self.ffn_grid, self.l_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParseError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


_CONFIG_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _parse_value(key: str, raw: str):
    kind = _CONFIG_TYPES[key]
    raw = raw.strip()
    if raw.lower() in ("none", "unlimited", ""):
        if "Optional" in str(kind):
            return None
        raise ParseError(f"{key} cannot be empty")
    try:
        if "tuple" in str(kind):
            parts = [p for p in raw.strip("()[] ").replace("x", ",").split(",") if p.strip()]
            if len(parts) != 2:
                raise ValueError
            return tuple(int(p) for p in parts)
        if "bool" in str(kind):
            if raw.lower() in ("true", "yes", "on", "1"):
                return True
            if raw.lower() in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if "int" in str(kind):
            return int(raw)
        if "float" in str(kind):
            return float(raw)
    except ValueError as exc:
        raise ParseError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config(text: str) -> ModelConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment.

    Tuples are written ``8, 20``; ``none`` or ``unlimited`` clears an optional
    field. Unknown keys, repeated keys and malformed lines are errors.
    """
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ParseError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ParseError(f"line {n}: repeated key {key!r}")
        values[key] = _parse_value(key, raw)
    try:
        return ModelConfig(**values)
    except IrrepsError as exc:
        raise ParseError(str(exc)) from exc


def load_config(path) -> ModelConfig:
    return parse_config(Path(path).read_text())


# --------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class BlockWeights:
    norm_attn: NormParams
    attention: AttentionWeights
    norm_ffn: NormParams
    ffn: FFNWeights

    def tensors(self) -> list:
        return [
            self.norm_attn.gamma,
            self.norm_attn.beta,
            *self.attention.tensors(),
            self.norm_ffn.gamma,
            self.norm_ffn.beta,
            *self.ffn.tensors(),
        ]


@dataclass(frozen=True)
class ModelWeights:
    embedding: np.ndarray  # (MAX_ATOMIC_NUMBER + 1, channels)
    edge_degree: EdgeDegreeWeights
    blocks: tuple
    final_norm: NormParams
    energy: FFNWeights
    force: AttentionWeights

    def tensors(self) -> list:
        """Every parameter array in declaration order (the save/load order)."""
        out = [self.embedding, *self.edge_degree.tensors()]
        for b in self.blocks:
            out.extend(b.tensors())
        out.extend([self.final_norm.gamma, self.final_norm.beta])
        out.extend(self.energy.tensors())
        out.extend(self.force.tensors())
        return [t for t in out if t is not None]


def _random_norm(rng, l_max, channels) -> NormParams:
    # affine parameters start at the identity, perturbed so tests exercise them
    gamma = (1.0 + 0.1 * rng.uniform(-1, 1, (l_max + 1, channels))).astype(np.float32)
    beta = (0.1 * rng.uniform(-1, 1, channels)).astype(np.float32)
    return NormParams(gamma, beta)


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """Uniform(+-1/sqrt(fan_in)) weights, deterministic per ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    L, C = cfg.l_max, cfg.channels
    embedding = rng.uniform(-1, 1, (MAX_ATOMIC_NUMBER + 1, C)).astype(np.float32)
    edge = EdgeDegreeWeights.init(
        rng, L, cfg.m_max, C, cfg.r_cut, cfg.envelope_p, cfg.n_radial, cfg.d_edge, cfg.edge_norm
    )
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(
            BlockWeights(
                _random_norm(rng, L, C),
                AttentionWeights.init(rng, cfg.attention_spec(), cfg.n_radial),
                _random_norm(rng, L, C),
                FFNWeights.init(rng, cfg.activation, L, C, cfg.d_ffn),
            )
        )
    final = _random_norm(rng, L, C)
    energy = FFNWeights.init(rng, "gate", L, C, cfg.d_ffn, c_out=1)
    force = AttentionWeights.init(rng, cfg.attention_spec("gate", c_out=1), cfg.n_radial)
    return ModelWeights(embedding, edge, tuple(blocks), final, energy, force)


MAGIC = b"EQCKWT01"


def save_weights(path, weights: ModelWeights, cfg: ModelConfig) -> None:
    """Write the flat weight container.

    Layout (little-endian): 8 magic bytes ``EQCKWT01``; uint32 length and UTF-8
    JSON of the config; uint32 tensor count; then per tensor a uint8 rank,
    uint32 dimensions and the float32 values in C order. Tensors follow
    :meth:`ModelWeights.tensors`.
    """
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    tensors = weights.tensors()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_weights(path) -> tuple[ModelWeights, ModelConfig]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ParseError("not an equicheck weight file")
    pos = 8
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    cfg_dict = json.loads(data[pos : pos + n])
    pos += n
    for key in ("attn_grid", "ffn_grid"):
        if cfg_dict.get(key) is not None:
            cfg_dict[key] = tuple(cfg_dict[key])
    cfg = ModelConfig.from_dict(cfg_dict)
    weights = init_weights(cfg, 0)
    targets = weights.tensors()
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if count != len(targets):
        raise ParseError(f"file holds {count} tensors, config needs {len(targets)}")
    for t in targets:
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        if tuple(shape) != t.shape:
            raise ParseError(f"tensor shape {shape} does not match expected {t.shape}")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        t[...] = np.frombuffer(data, "<f4", count=size // 4, offset=pos).reshape(shape)
        pos += size
    return weights, cfg


# --------------------------------------------------------------------------
# forward pass


def edge_frames(graph: AtomGraph, cfg: ModelConfig) -> EdgeFrames:
    return EdgeFrames.build(graph.src, graph.dst, graph.vec, graph.n_atoms, cfg.l_max, cfg.m_max)


def node_features(
    graph: AtomGraph, weights: ModelWeights, cfg: ModelConfig, frames=None, trace: Optional[list] = None
) -> IrrepsFeature:
    """Node features after embedding, all blocks and the final norm.

    If ``trace`` is a list, each sub-layer output is appended to it as
    ``(name, feature)`` before being added to the residual stream.
    """
    frames = edge_frames(graph, cfg) if frames is None else frames
    norm = LAYER_NORMS[cfg.norm]
    x = atom_embedding(graph.species, weights.embedding, cfg.l_max)
    x = x.with_data(x.data + edge_degree_embedding(frames, weights.edge_degree).data)
    ffn_grid = cfg.ffn_grid_spec()
    for b in weights.blocks:
        attn = b.attention
        if attn.spec.envelope_in_softmax != cfg.envelope_in_softmax:
            attn = replace(attn, spec=replace(attn.spec, envelope_in_softmax=cfg.envelope_in_softmax))
        h = graph_attention(norm(x, b.norm_attn), frames, attn)
        if trace is not None:
            trace.append((f"block{len(trace) // 2}.attention", h))
        x = x.with_data(x.data + h.data)
        h = feed_forward(norm(x, b.norm_ffn), b.ffn, ffn_grid)
        if trace is not None:
            trace.append((f"block{len(trace) // 2}.ffn", h))
        x = x.with_data(x.data + h.data)
    if cfg.final_norm:
        x = norm(x, weights.final_norm)
    return x


def forward(graph: AtomGraph, weights: ModelWeights, cfg: ModelConfig) -> dict:
    """Energy (model units) and direct per-atom forces."""
    frames = edge_frames(graph, cfg)
    x = node_features(graph, weights, cfg, frames)
    return {
        "energy": energy_head(x, weights.energy),
        "forces": force_head(x, frames, weights.force),
    }


def energy_path_scan(
    positions,
    species,
    moving_atom: int,
    direction,
    t_range: tuple[float, float],
    step: float,
    weights: ModelWeights,
    cfg: ModelConfig,
) -> np.ndarray:
    """Energy along ``positions[moving_atom] + t * direction`` for t in ``t_range``.

    Rebuilds the graph at every sample without a neighbour cap: nearest-k
    truncation would itself make the energy jump. Returns an array of
    ``(t, E)`` rows.
    """
    d = np.asarray(direction, dtype=np.float64)
    if not np.linalg.norm(d) > 0:
        raise IrrepsError("scan direction must be non-zero")
    d = d / np.linalg.norm(d)
    base = np.asarray(positions, dtype=np.float64)
    n = int(round((t_range[1] - t_range[0]) / step))
    ts = t_range[0] + step * np.arange(n + 1)
    out = np.empty((len(ts), 2))
    for k, t in enumerate(ts):
        pos = base.copy()
        pos[moving_atom] = base[moving_atom] + t * d
        g = build_graph(pos, species, cfg.r_cut, None)
        x = node_features(g, weights, cfg)
        out[k] = t, energy_head(x, weights.energy)
    return out
