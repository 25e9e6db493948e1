"""The tan pencil has non-coplanar tangents; straight lines would not.

Run: python demos/coniness.py
"""

import numpy as np

from cklab.tan_example import TanConfig, coniness_det

print("   |p|     det          leading      rel_err   lines")
for r in (1e-2, 10**-2.5, 1e-3, 10**-3.5):
    cfg = TanConfig(3, 1.05, [r / np.sqrt(2), r / np.sqrt(2)])
    det, lead, rel = coniness_det(cfg)
    lines = coniness_det(cfg, family="lines")[0]
    print(f"{r:8.1e}  {det:11.4e}  {lead:11.4e}  {rel:8.4f}  {lines:9.1e}")
