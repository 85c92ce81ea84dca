"""
Telling two angles apart
========================

Two neighbours at unit distance, once at 90 degrees and once at 120. Every
pairwise distance from the centre is the same, so anything built only from
centre-neighbour distances sees identical environments. Telling them apart
needs an angle, a three-body quantity.

With gate activations the central scalars only ever see sums of
per-neighbour terms, and each term depends on a distance alone. The SwiGLU-S2 product couples the two neighbours' signals on the
sphere and picks up the angle.
"""

import numpy as np

from equicheck.harness.body_order import angle_pair, body_order_probe, identical_pair

pair = angle_pair(90, 120)
print(pair.name)
print("  A:", np.round(pair.env_a, 3).tolist())
print("  B:", np.round(pair.env_b, 3).tolist())

###############################################################################
# Separation = |E_A - E_B| / (|E_A| + |E_B|) over 16 random weight draws.

for act in ("gate", "s2", "swiglu_s2"):
    for n in (1, 2, 3):
        r = body_order_probe(act, n, pair, seeds=16)
        print(f"  {act:10s} ffns={n}  median={r['median']:.2e}  max={r['max']:.2e}  -> {r['verdict']}")

###############################################################################
# A sanity check: the same environment twice is never separated.

r = body_order_probe("swiglu_s2", 1, identical_pair(), seeds=4)
print("identical pair, swiglu_s2:", r["max"], r["verdict"])
