"""Simulate the closed loop under the saddle pair, compare the Monte-Carlo
cost with the closed-form value, and probe the saddle inequalities.

Run: python demos/02_closed_loop.py [output-dir] [paths]
"""

import sys
from pathlib import Path

import numpy as np

from hinfswitch import (Perturbation, cost_mc, filter_consistency_stats, load_example, make_rng,
                        outcome_policies, sample_path, sample_paths, saddle_check, simulate,
                        simulate_path, solve_all, synthesize, value_formula)
from hinfswitch.svg import line_plot

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
n_paths = int(sys.argv[2]) if len(sys.argv) > 2 else 5000

model = load_example()
sol = solve_all(model)
gains = synthesize(sol, model)
u, v = outcome_policies(gains)

# One path: the state splits into its filtered part and the filtering error.
chain = sample_path(model.generator, model.initial_regime, 0.0, model.dims.T, make_rng(1, 0))
path = simulate_path(model, u, v, sol.grid, chain, seed=1)
print(f"sample path: {len(chain.jump_times)} regime switches, x(T) = {path.x[-1, 0]:+.4f}")
line_plot(out / "path.svg", [("x", path.times, path.x[:, 0]), ("xhat", path.times, path.xhat[:, 0]),
                             ("xtilde", path.times, path.xtilde[:, 0]),
                             ("regime", path.times, path.regime + 1.0)],
          "closed loop under the saddle pair", "s", "")
path.to_csv(out / "path.csv")

value = value_formula(sol, model)
est = cost_mc(model, u, v, model.gamma, n_paths=n_paths, seed=0, grid=sol.grid)
print(f"value {value:.5f}; Monte Carlo {est}; gap {(est.mean - value) / est.stderr:+.2f} se")

# The filtering error is orthogonal to everything the controller sees.
chains = sample_paths(model.generator, 0, 0.0, model.dims.T, n_paths, make_rng(0, 0))
batch = simulate(model, u, v, sol.grid, chains, record=np.arange(500, 3501, 500))
st = filter_consistency_stats(batch)
for s, c, se in zip(st.times, st.cross, st.cross_stderr):
    print(f"  s = {s:3.1f}  E<xhat, xtilde> = {c:+.2e} +/- {se:.1e}")

# Deviating from the saddle pair helps neither player.
perts = [Perturbation("control", "ThetaHat1", 0.25), Perturbation("control", "offset", 0.1),
         Perturbation("disturbance", "ThetaHat2", 0.25),
         Perturbation("disturbance", "offset", 0.1)]
for r in saddle_check(model, gains, perts, n_paths=n_paths, seed=0):
    print(f"  {r.description:<28} dJ = {r.delta:+.4f} +/- {r.stderr:.4f}"
          f"  {'ok' if r.passed else 'VIOLATED'}")
