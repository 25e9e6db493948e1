"""Which phases satisfy the proportionality condition, and how badly the worst one fails.

Run: python demos/bourgain_check.py
"""

import numpy as np

from cklab.phase_core import check_bourgain, sample_domain
from cklab.phases import bochner_riesz, rest, tan, worst

for ph in (rest(3), bochner_riesz(3), tan(3), tan(4), worst(3)):
    res = np.array([check_bourgain(ph, x, t, xi).bourgain_residual for x, t, xi in sample_domain(ph, 100, seed=0)])
    print(f"{ph.name:>28}: residual in [{res.min():.2e}, {res.max():.2e}]")

# the failure of the worst phase decays as |t| grows, so look near t = 0 too
ph = worst(3)
for t in (0.0, 0.05, 0.1, 0.3):
    r = check_bourgain(ph, np.zeros(2), t, np.array([0.1, 0.1])).bourgain_residual
    print(f"worst at t = {t:4.2f}: {r:.3f}")
