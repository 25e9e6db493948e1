"""Straightening error against the distance from the anchor curve.

At the origin anchor the built-in phases are even in (x, xi), so the
quadratic error term vanishes and the fit shows slope 3.  Off the origin
the slope is 2.

Run: python demos/straightening_order.py
"""

import numpy as np

from cklab.curve_tracer import v_of
from cklab.phases import abc_naive, bochner_riesz, canonical_abc, tan, worst
from cklab.straightener import fit_error_order, generic_anchor

for make in (tan, bochner_riesz):
    ph = make(3)
    x0, t0, xi0 = ph.origin
    for label, a in (("origin", 0.0), ("generic", 0.1)):
        anchor = generic_anchor(ph, a) if a else (xi0, v_of(ph, x0, t0, xi0))
        rep = fit_error_order(ph, canonical_abc(ph), *anchor)
        print(f"{ph.name:>18} {label:>8}: slope {rep.slope:.3f}")

rep = fit_error_order(worst(3), abc_naive(), np.zeros(2), np.zeros(2), strict=False)
print(f"worst with the naive triple: slope {rep.slope:.3f} (first order only)")
