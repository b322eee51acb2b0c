"""Solve the coupled Riccati systems of the bundled two-regime example and
look at the saddle gains.

Run: python demos/01_riccati_and_gains.py [output-dir]
"""

import sys
from pathlib import Path

import numpy as np

from hinfswitch import load_example, player1_pair, solve_all, synthesize
from hinfswitch.riccati import MARGIN_NAMES
from hinfswitch.svg import line_plot

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

model = load_example(gamma=1.0)
print(f"horizon T = {model.dims.T}, regimes = {model.dims.D}, gamma = {model.gamma}")
print("generator:\n", model.generator)

# Backward RK4 from the zero terminal weight; every node is certified.
sol = solve_all(model, step=1e-3)
print("\nP(0, i) per regime:", sol.P[0, :, 0, 0])
print("Pi(0, i) per regime:", sol.Pi[0, :, 0, 0])
for j, name in enumerate(MARGIN_NAMES):
    print(f"  smallest {name:<7} margin {np.nanmin(sol.margins[..., j]):.4f}")

gains = synthesize(sol, model)
print("\n   s    ThetaHat1 (r1, r2)      ThetaHat2 (r1, r2)     ThetaTilde2 (r1, r2)")
for s in (0.0, 1.0, 2.0, 3.0, 3.5):
    k = int(round(s / sol.grid.step))
    row = [gains.ThetaHat1[k, :, 0, 0], gains.ThetaHat2[k, :, 0, 0],
           gains.ThetaTilde2[k, :, 0, 0]]
    print(f"  {s:3.1f}  " + "  ".join(f"{a[0]:+.4f} {a[1]:+.4f}    " for a in row))

# The feedback pair built from the first player's Schur complement lands on
# the same control gain.
u_gain = player1_pair(sol, model).induced()[0]
print("\nmax |u gain (player pair) - ThetaHat1| =",
      float(np.max(np.abs(u_gain - gains.ThetaHat1))))

s = sol.grid.nodes
line_plot(out / "riccati.svg",
          [(f"{nm} regime {i + 1}", s, arr[:, i, 0, 0]) for nm, arr in (("Pi", sol.Pi), ("P", sol.P))
           for i in range(2)], "Riccati solutions, gamma = 1", "s", "")
line_plot(out / "gains.svg",
          [(f"{nm} regime {i + 1}", s, arr[:, i, 0, 0])
           for nm, arr in (("ThetaHat1", gains.ThetaHat1), ("ThetaHat2", gains.ThetaHat2),
                           ("ThetaTilde2", gains.ThetaTilde2)) for i in range(2)],
          "saddle gains, gamma = 1", "s", "")
print(f"\nplots written to {out}/")
