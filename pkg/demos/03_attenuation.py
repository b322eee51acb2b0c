"""How small can the attenuation level be?  Sweep gamma, bracket the
solvability threshold and estimate the disturbance-to-cost ratio.

Run: python demos/03_attenuation.py [output-dir] [paths]
"""

import sys
from pathlib import Path

import numpy as np

from hinfswitch import gamma_star, hinf_ratio, load_example
from hinfswitch.evaluate import gamma_sweep, write_sweep_csv
from hinfswitch.svg import line_plot

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
n_paths = int(sys.argv[2]) if len(sys.argv) > 2 else 2000

model = load_example()
rows = gamma_sweep(model, np.linspace(0.05, 3.0, 20))
write_sweep_csv(rows, out / "gamma_sweep.csv")
for r in rows:
    print(f"  gamma {r.gamma:5.2f}  {'solvable' if r.solvable else 'fails   '}"
          f"  margin {r.min_margin:+.4f}")

lo, hi = gamma_star(model, 0.01, 3.0, tol=1e-3)
print(f"solvability threshold in [{lo:.4f}, {hi:.4f}]")

# At each level, the worst ratio found over the candidate disturbances
# must stay below gamma^2.
for g in (1.0, 2.0):
    res = hinf_ratio(load_example(g), n_paths=n_paths, seed=0)
    print(f"gamma = {g:g}: max ratio {res.ratio:.4f} (+/- {res.stderr:.4f}) at {res.argmax},"
          f" bound {g * g:g}")
    top = sorted(res.ratios.items(), key=lambda kv: -kv[1])[:3]
    print("   runners-up:", ", ".join(f"{k} {r:.3f}" for k, r in top[1:]))

line_plot(out / "gamma_sweep.svg",
          [("binding margin", [r.gamma for r in rows], [r.min_margin for r in rows])],
          "Riccati solvability margin", "gamma", "margin")
