"""
Crossing the cutoff sphere
==========================

An atom moves slowly out of its neighbour's cutoff sphere while the energy
is sampled along the path. With the envelope inside the attention softmax
the neighbour fades out and the energy is continuous: the change across the
crossing interval is just the local slope times the step. Without it the
softmax denominator loses a whole term at once and the energy jumps.
"""

from equicheck.harness.smoothness import crossings, default_scenario, smoothness_scan
from equicheck.model import ModelConfig

structure, scan = default_scenario()
print("positions:\n", structure.positions)
print("atom", scan.moving_atom, "moves along", scan.direction)
print("crosses the 5 A sphere at t =", crossings(structure, scan, 5.0))

rep = smoothness_scan(structure, scan, ModelConfig())

###############################################################################
# The scan near the crossing, both arms side by side.

t_cross = rep["crossings"][0]
for (t, e_on), (_, e_off) in zip(rep["scan_on"], rep["scan_off"]):
    if abs(t - t_cross) < 3 * scan.step:
        print(f"  t={t:+.3f}  E_on={e_on:+.6f}  E_off={e_off:+.6f}")

###############################################################################
# Halving the step halves the ON jump (the energy is continuous) while the
# OFF jump stays put (it is a real discontinuity).

print(f"jump ON  (step {scan.step}):   {rep['jump_on']:.3e}")
print(f"jump ON  (step {scan.step / 2}):   {rep['jump_on_half_step']:.3e}")
print(f"jump OFF (step {scan.step}):   {rep['jump_off']:.3e}")
print(f"halving ratio {rep['halving_ratio']:.2f}, OFF/ON ratio {rep['off_on_ratio']:.1f}")
