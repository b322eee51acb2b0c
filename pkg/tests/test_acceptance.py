"""Acceptance gate: one test per primary criterion, each logging a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from hinfswitch import (algebraic_system_solve, cost_mc, filter_consistency_stats,
                        gamma_star, hinf_ratio, load_example, make_rng, outcome_policies,
                        player1_pair, player2_pair, sample_paths, saddle_check,
                        schur_identity_residuals, simulate, solve_all, solve_eta, solve_p,
                        synthesize, transition_matrix, value_formula)
from hinfswitch.evaluate import default_perturbations, gamma_sweep
from hinfswitch.riccati import node_blocks

import conftest
from conftest import scalar_model
from test_riccati import random_inhomogeneous


def record(name, ok, detail):
    conftest.ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


class Clock:
    def __enter__(self):
        self.t = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t


def _scalar_rk4(f, y, T, h):
    """Plain backward RK4 over [0, T]; returns node values at the multiples of ``h``."""
    K = int(round(T / h))
    out = np.empty((K + 1, len(y)))
    out[K] = y
    y = np.array(y, dtype=float)
    for k in range(K, 0, -1):
        k1 = f(y)
        k2 = f(y - 0.5 * h * k1)
        k3 = f(y - 0.5 * h * k2)
        k4 = f(y - h * k3)
        y = y - (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k - 1] = y
    return out


def test_riccati_lq_reduction():
    a, b1, c, d1, cb, d1b, q, r1, g = 0.4, 1.0, 0.3, 0.2, 0.25, 0.15, 1.0, 0.5, 0.7
    m = scalar_model(gamma=10.0, A=a, B1=b1, C=c, D1=d1, Cbar=cb, D1bar=d1b, Q=q, R1=r1,
                     R2=1.0, G=g)

    def dydt(y):
        # d/ds of (Pi, P) from the scalar LQ Riccati pair
        pi, p = y
        sh = b1 * p + d1 * p * c + d1b * pi * cb
        rh = r1 + d1 * d1 * p + d1b * d1b * pi
        return np.array([-(2 * a * pi + (c * c + cb * cb) * pi + q),
                         -(2 * a * p + c * c * p + cb * cb * pi + q - sh * sh / rh)])

    ref = _scalar_rk4(dydt, [g, g], 1.0, 1e-5)[::100]
    with Clock() as clk:
        sol = solve_all(m, step=1e-3)
    err = max(np.max(np.abs(sol.P[:, 0, 0, 0] / ref[:, 1] - 1)),
              np.max(np.abs(sol.Pi[:, 0, 0, 0] / ref[:, 0] - 1)))
    record("Riccati LQ reduction", err <= 1e-6 and clk.elapsed < 5,
           f"max rel err {err:.2e} (tol 1e-6), {clk.elapsed:.2f} s (limit 5 s)")


def test_two_form_riccati_equivalence():
    with Clock() as clk:
        m = load_example(1.0)
        sol = solve_all(m)
        P2 = solve_p(m, sol.grid, sol.Pi, form="rearranged")
    err = float(np.max(np.abs(P2 - sol.P)))
    record("two-form Riccati equivalence", err <= 1e-8 and clk.elapsed < 10,
           f"max |P - P'| {err:.2e} (tol 1e-8), {clk.elapsed:.2f} s (limit 10 s)")


def test_bode_equivalence():
    with Clock() as clk:
        m = random_inhomogeneous(12345)
        sol = solve_all(m)
        etas = [solve_eta(m, sol.grid, sol.Pi, sol.P, form=f)
                for f in ("player1", "player2", "compact")]
    err = max(float(np.max(np.abs(etas[i] - etas[j]))) for i, j in ((0, 1), (0, 2), (1, 2)))
    size = float(np.max(np.abs(etas[2])))
    record("eta equation equivalence", err <= 1e-8 and size > 1e-2 and clk.elapsed < 5,
           f"max pairwise diff {err:.2e} (tol 1e-8), |eta|max {size:.3f}, "
           f"{clk.elapsed:.2f} s (limit 5 s)")


def test_block_identity_property():
    rng = make_rng(2024, 0)
    worst = 0.0
    for _ in range(100):
        mm, nv, n = (int(x) for x in rng.integers(1, 5, size=3))
        X, Y = rng.standard_normal((mm, mm)), rng.standard_normal((nv, nv))
        R12 = rng.standard_normal((mm, nv))
        R = np.block([[X @ X.T + 0.5 * np.eye(mm), R12], [R12.T, -(Y @ Y.T + 0.5 * np.eye(nv))]])
        worst = max(worst, *schur_identity_residuals(R, rng.standard_normal((mm + nv, n)), mm))
    record("block decomposition identity", worst <= 1e-10,
           f"100 draws, worst residual {worst:.2e} (tol 1e-10)")


def test_player_pair_consistency(example, example_solution):
    sol, m = example_solution, example
    k1 = player1_pair(sol, m).induced()
    k2 = player2_pair(sol, m).induced()
    bd = node_blocks(sol, m)
    K1, D = sol.P.shape[:2]
    ref_u, ref_v = np.empty((K1, D)), np.empty((K1, D))
    for k in range(K1):
        for i in range(D):
            u, v = algebraic_system_solve(bd.Rhat[k, i], bd.Shat[k, i], bd.Psi[k, i],
                                          np.ones(1), 1)
            ref_u[k, i], ref_v[k, i] = u[0], v[0]
    rel = lambda a, b: float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))
    errs = []
    for ug, vg, uo, vo in (k1, k2):
        errs += [rel(ug[..., 0, 0] + uo[..., 0], ref_u), rel(vg[..., 0, 0] + vo[..., 0], ref_v)]
    errs.append(rel(k1[0], k2[0]))
    errs.append(rel(k1[1], k2[1]))
    worst = max(errs)
    record("player-pair consistency", worst <= 1e-9,
           f"worst relative diff {worst:.2e} over {K1 * D} node-regime pairs (tol 1e-9)")


def test_value_vs_monte_carlo(example, example_solution, example_gains):
    with Clock() as clk:
        u, v = outcome_policies(example_gains)
        est = cost_mc(example, u, v, example.gamma, n_paths=50_000, seed=0,
                      grid=example_solution.grid)
    val = value_formula(example_solution, example)
    gap = abs(est.mean - val)
    record("value vs Monte Carlo", gap <= 3 * est.stderr and clk.elapsed < 120,
           f"value {val:.6f}, MC {est.mean:.6f} +/- {est.stderr:.6f} "
           f"(|gap| = {gap / est.stderr:.2f} se), {clk.elapsed:.1f} s (limit 120 s)")


def test_saddle_inequalities(example, example_gains):
    with Clock() as clk:
        res = saddle_check(example, example_gains, default_perturbations((0.1, 0.25)),
                           n_paths=50_000, seed=0)
    for r in res:
        print(f"    {r.description:<32} dJ {r.delta:+.3e} +/- {r.stderr:.1e}"
              f" {'pass' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in res)
    record("saddle inequalities", ok and clk.elapsed < 300,
           f"{sum(r.passed for r in res)}/{len(res)} perturbations pass, "
           f"{clk.elapsed:.1f} s (limit 300 s)")


def test_hinf_performance():
    with Clock() as clk:
        res = {g: hinf_ratio(load_example(g), n_paths=10_000, seed=0) for g in (1.0, 2.0)}
    ok = all(r.ratio < r.gamma ** 2 for r in res.values())
    detail = "; ".join(f"gamma={g:g}: max ratio {r.ratio:.4f} +/- {r.stderr:.4f} at "
                       f"{r.argmax}, margin {r.margin:.4f}" for g, r in res.items())
    record("H-infinity performance", ok and clk.elapsed < 300,
           f"{detail}; {clk.elapsed:.1f} s (limit 300 s)")


def test_gamma_solvability_monotone(example):
    with Clock() as clk:
        gammas = np.linspace(0.05, 3.0, 20)
        rows = gamma_sweep(example, gammas)
        flags = [r.solvable for r in rows]
        up_set = all(flags[j:] == [True] * (20 - j) for j in range(20) if flags[j])
        lo, hi = gamma_star(example, 0.01, 3.0, tol=1e-3)
    record("gamma solvability monotone", up_set and hi - lo <= 1e-3 and clk.elapsed < 60
           and any(flags) and not all(flags),
           f"first solvable grid point {gammas[flags.index(True)]:.3f}, bracket "
           f"[{lo:.5f}, {hi:.5f}] width {hi - lo:.1e}, {clk.elapsed:.1f} s (limit 60 s)")


def test_chain_statistics():
    lam = np.array([[-1.0, 1.0], [2.0, -2.0]])
    n = 100_000
    msgs, ok = [], True
    for i in range(2):
        # a horizon of 40 truncates a first holding time with probability < e^-40
        b = sample_paths(lam, i, 0.0, 40.0, n, make_rng(10 + i, 0))
        mean = float(b.jump_times[:, 0].mean())
        good = abs(mean * abs(lam[i, i]) - 1) <= 0.02
        ok &= good
        msgs.append(f"hold[{i + 1}] {mean:.4f} vs {1 / abs(lam[i, i]):.4f}")
    dt = 0.1
    Pm = transition_matrix(lam, dt)
    worst = 0.0
    for i in range(2):
        b = sample_paths(lam, i, 0.0, dt, n, make_rng(20 + i, 0))
        end = b.regimes_at(dt)
        for j in range(2):
            freq = float(np.mean(end == j))
            se = math.sqrt(Pm[i, j] * (1 - Pm[i, j]) / n)
            worst = max(worst, abs(freq - Pm[i, j]) / se)
    ok &= worst <= 3
    record("chain statistics", ok,
           f"{', '.join(msgs)} (tol 2%); one-step frequencies worst {worst:.2f} se (tol 3)")


def test_filter_orthogonality(example, example_gains):
    u, v = outcome_policies(example_gains)
    grid = example_gains.grid
    checkpoints = [700, 1400, 2100, 2800, 3500]
    chains = sample_paths(example.generator, 0, grid.t0, grid.T, 10_000, make_rng(0, 0))
    b = simulate(example, u, v, grid, chains, seed=0, record=checkpoints)
    st = filter_consistency_stats(b)
    cross = np.abs(st.cross) / st.cross_stderr
    mean = st.mean_xtilde_norm / st.mean_xtilde_stderr
    ok = np.all(cross <= 3) and np.all(mean <= 3) and st.times.size == 5
    record("filter orthogonality", ok,
           f"|E<xhat,xtilde>| worst {cross.max():.2f} se, ||E xtilde|| worst {mean.max():.2f} se "
           f"at s = {', '.join(f'{s:g}' for s in st.times)}")


def test_gain_regime_ordering(example_gains):
    g = example_gains
    k = int(np.searchsorted(g.grid.nodes, 3.0, side="right"))
    mag = lambda a: np.abs(a[:k, :, 0, 0])
    th1, th2, tt2 = mag(g.ThetaHat1), mag(g.ThetaHat2), mag(g.ThetaTilde2)
    checks = {"ThetaHat1 weaker in regime 1": bool(np.all(th1[:, 0] < th1[:, 1])),
              "ThetaHat2 stronger in regime 1": bool(np.all(th2[:, 0] > th2[:, 1])),
              "ThetaTilde2 stronger in regime 1": bool(np.all(tt2[:, 0] > tt2[:, 1]))}
    record("regime ordering of saddle gains", all(checks.values()),
           ", ".join(f"{name}: {v}" for name, v in checks.items()) + f" on {k} nodes of [0, 3]")
