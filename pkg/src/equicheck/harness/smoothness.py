"""Energy scans across the cutoff sphere, with and without the envelope in the softmax."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..model import (
    ModelConfig,
    ModelWeights,
    ParseError,
    Structure,
    energy_path_scan,
    init_weights,
    read_xyz,
)


@dataclass(frozen=True)
class ScanSpec:
    moving_atom: int
    direction: tuple
    t_start: float
    t_stop: float
    step: float

    @classmethod
    def parse(cls, text: str) -> "ScanSpec":
        """Flat ``key = value`` text; ``direction`` is three comma-separated numbers."""
        vals = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"scan line {n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in vals:
                raise ParseError(f"scan line {n}: repeated key {k!r}")
            vals[k] = v
        need = {"moving_atom", "direction", "t_start", "t_stop", "step"}
        if set(vals) != need:
            raise ParseError(f"scan keys must be exactly {sorted(need)}, got {sorted(vals)}")
        try:
            direction = tuple(float(s) for s in vals["direction"].split(","))
            spec = cls(int(vals["moving_atom"]), direction, float(vals["t_start"]),
                       float(vals["t_stop"]), float(vals["step"]))
        except ValueError as e:
            raise ParseError(f"scan: {e}") from None
        if len(direction) != 3 or spec.step <= 0 or spec.t_stop <= spec.t_start:
            raise ParseError("scan: need a 3-vector direction, step > 0 and t_stop > t_start")
        return spec

    def halved(self) -> "ScanSpec":
        return dataclasses.replace(self, step=self.step / 2)


def default_scenario() -> tuple[Structure, ScanSpec]:
    """Three carbons; the third leaves the first one's 5 A sphere near t = 4.899.

    It stays well inside the second atom's sphere throughout, so the only
    neighbour-set change along the path is that single crossing.
    """
    pos = np.array([[0.0, 0.0, 0.0], [2.5, 0.5, 0.3], [4.8, 1.0, 0.0]])
    return Structure(np.full(3, 6, dtype=np.intp), pos), ScanSpec(2, (1.0, 0.0, 0.0), -0.05, 0.15, 0.004)


def crossings(structure: Structure, scan: ScanSpec, r_cut: float) -> list[float]:
    """Path parameters at which the moving atom is exactly ``r_cut`` from another atom."""
    pos = np.asarray(structure.positions, dtype=np.float64)
    d = np.asarray(scan.direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    out = []
    for j in range(len(pos)):
        if j == scan.moving_atom:
            continue
        q = pos[scan.moving_atom] - pos[j]
        b = q @ d
        disc = b * b - (q @ q - r_cut * r_cut)
        if disc < 0:
            continue
        for t in (-b - np.sqrt(disc), -b + np.sqrt(disc)):
            if scan.t_start <= t <= scan.t_stop:
                out.append(float(t))
    return sorted(out)


def boundary_jump(scan_rows: np.ndarray, cross: list[float]) -> float:
    """Largest ``|E_{k+1} - E_k|`` over sample intervals that contain a crossing."""
    t, e = scan_rows[:, 0], scan_rows[:, 1]
    jump = 0.0
    for c in cross:
        k = int(np.searchsorted(t, c)) - 1
        if 0 <= k < len(t) - 1:
            jump = max(jump, abs(float(e[k + 1] - e[k])))
    return jump


def _scan(structure, scan, weights, cfg):
    return energy_path_scan(
        structure.positions, structure.species, scan.moving_atom, scan.direction,
        (scan.t_start, scan.t_stop), scan.step, weights, cfg,
    )


def smoothness_scan(
    structure: Optional[Structure] = None,
    scan: Optional[ScanSpec] = None,
    cfg: Optional[ModelConfig] = None,
    weights: Optional[ModelWeights] = None,
    seed: int = 0,
) -> dict:
    """Boundary jumps with the envelope inside (ON) and outside (OFF) the softmax.

    ON is scanned at ``step`` and ``step / 2`` to measure how the jump scales;
    OFF is scanned at ``step``. Both runs share the same weights. Without a
    crossing inside the scanned range both jumps are reported as zero.
    """
    if structure is None or scan is None:
        ds, dscan = default_scenario()
        structure, scan = structure or ds, scan or dscan
    if not 0 <= scan.moving_atom < len(structure.positions):
        raise ParseError(f"moving_atom {scan.moving_atom} out of range")
    cfg = cfg or ModelConfig()
    weights = weights or init_weights(cfg, seed)
    on = dataclasses.replace(cfg, envelope_in_softmax=True)
    off = dataclasses.replace(cfg, envelope_in_softmax=False)
    cross = crossings(structure, scan, cfg.r_cut)

    rows_on = _scan(structure, scan, weights, on)
    rows_half = _scan(structure, scan.halved(), weights, on)
    rows_off = _scan(structure, scan, weights, off)
    j_on, j_half, j_off = (boundary_jump(r, cross) for r in (rows_on, rows_half, rows_off))

    def ratio(a, b):
        return float(a / b) if b > 0 else None

    return {
        "crossings": cross,
        "step": scan.step,
        "jump_on": j_on,
        "jump_on_half_step": j_half,
        "jump_off": j_off,
        "halving_ratio": ratio(j_on, j_half),
        "off_on_ratio": ratio(j_off, j_on),
        "scan_on": rows_on.tolist(),
        "scan_off": rows_off.tolist(),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def load_scenario(structure_path, scan_path) -> tuple[Structure, ScanSpec]:
    frames = read_xyz(structure_path)
    with open(scan_path) as fh:
        return frames[0], ScanSpec.parse(fh.read())
