"""Sticky tube families: the hypotheses, the covers, and the measured union.

The Cantor family at delta = 2^-6 has only 64 directions, far too little
shading mass for (c); keeping three quarters per level fixes that.

Run: python demos/sticky_tubes.py   (about a minute)
"""

from cklab.phases import rest
from cklab.tube_lab import make_sticky_family, sk_experiment

ph = rest(3)
delta = 2.0**-6
for mode, keep in (("grid", 2), ("cantor", 2), ("cantor", 3)):
    fam = make_sticky_family(ph, delta, mode, seed=0, keep=keep)
    rep = sk_experiment(ph, delta, fam, 0.2, measure=(mode == "grid"))
    print(f"{fam.label} keep={keep}: {len(fam)} tubes")
    print(f"  (a) {rep.a_pass}  (b) {rep.b_pass} {rep.b_counts}")
    print(f"  (c) {rep.c_pass}  mass {rep.shading_mass:.4f} vs {rep.c_threshold:.4f}")
    if rep.union_volume is not None:
        print(f"  union {rep.union_volume:.4f}, eps_hat {rep.eps_hat:.3f}")
