import numpy as np
import pytest
from scipy.linalg import expm

from hinfswitch import (ChainBatch, LinearFeedbackControl, LinearFeedbackDisturbance,
                        OpenLoopControl, OpenLoopDisturbance, UnsupportedDisturbance,
                        ZeroControl, ZeroDisturbance, filter_consistency_stats, make_grid,
                        make_rng, model_grid, outcome_policies, sample_paths, simulate,
                        simulate_many, simulate_path)
from hinfswitch.sim import ControlPolicy, DisturbancePolicy, SaddleControl

from conftest import scalar_model


def still_chains(n_paths, T, D=1, t0=0.0, regime=0):
    """Chain paths that never jump."""
    return ChainBatch(t0, T, np.full((n_paths, 1), np.inf),
                      np.full((n_paths, 2), regime, dtype=int),
                      np.zeros(n_paths, dtype=int), D)


def example_chains(model, grid, n, seed=0):
    return sample_paths(model.generator, model.initial_regime, grid.t0, grid.T, n,
                        make_rng(seed, 0))


def test_zero_model_zero_cost():
    m = scalar_model(xi=1.3)
    grid = make_grid(0, 1, 1e-2)
    b = simulate(m, ZeroControl(), ZeroDisturbance(), grid, still_chains(50, 1.0), record="all")
    assert np.all(b.x == 1.3) and not np.any(b.xtilde)
    assert np.all(b.cost() == 0) and np.all(b.cost(1.0) == 0)


def test_zero_policies_zero_weights_cost_exactly_zero(example):
    m = example.replace(weights=tuple(w.__class__(**{**vars(w), "Q": np.zeros((1, 1))})
                                      for w in example.weights))
    grid = model_grid(m, 1e-2)
    b = simulate(m, ZeroControl(), ZeroDisturbance(), grid, example_chains(m, grid, 200))
    assert np.all(b.cost() == 0.0)


def test_gamma_zero_is_plain_cost(example, example_gains):
    u, v = outcome_policies(example_gains)
    grid = example_gains.grid
    b = simulate(example, u, v, grid, example_chains(example, grid, 300))
    assert np.array_equal(b.cost(0.0), b.cost(None))
    assert np.array_equal(b.cost(1.0), b.running - b.v_energy + b.terminal)


def test_soft_cost_identity_from_recorded_path():
    m = scalar_model(A=0.2, B1=0.7, B2=0.5, C=0.3, D1=0.2, D2=0.1, Cbar=0.4, D1bar=0.1,
                     D2bar=0.2, Q=1.0, R1=0.5, R2=0.3, S1=0.1, S2=-0.05, G=0.4, q=0.2,
                     rho1=0.1, rho2=-0.3, g=0.5, b=0.1, sigma=0.2, sigmabar=0.1)
    grid = make_grid(0, 1, 1e-2)
    u = LinearFeedbackControl([[-0.8]], [0.05])
    v = LinearFeedbackDisturbance([[0.3]], [[0.6]], [0.1])
    b = simulate(m, u, v, grid, still_chains(200, 1.0), seed=3, record="all")
    x, uu, vv = b.x[..., 0], b.u[..., 0], b.v[..., 0]
    run = (1.0 * x * x + 0.5 * uu * uu + 0.3 * vv * vv + 2 * 0.1 * x * uu
           - 2 * 0.05 * x * vv + 2 * 0.2 * x + 2 * 0.1 * uu - 2 * 0.3 * vv)
    h = np.diff(grid.nodes)[:, None]
    J = np.sum(0.5 * h * (run[1:] + run[:-1]), axis=0) + 0.4 * x[-1] ** 2 + 2 * 0.5 * x[-1]
    E = np.sum(0.5 * h * (vv[1:] ** 2 + vv[:-1] ** 2), axis=0)
    assert np.allclose(b.cost(), J, rtol=1e-12, atol=1e-14)
    for gamma in (0.5, 2.0):
        assert np.allclose(b.cost(gamma), J - gamma ** 2 * E, rtol=1e-12, atol=1e-14)


def test_state_decomposition_exact(example, example_gains):
    u, v = outcome_policies(example_gains)
    grid = example_gains.grid
    b = simulate(example, u, v, grid, example_chains(example, grid, 100), record="all")
    assert np.array_equal(b.x, b.xhat + b.xtilde)
    assert np.all(b.xhat[0] == 1.0) and np.all(b.xtilde[0] == 0.0)
    assert np.array_equal(b.v, b.vhat + b.vtilde)


def test_common_random_numbers_bit_identical(example, example_gains):
    u, v = outcome_policies(example_gains)
    grid = example_gains.grid
    ch = example_chains(example, grid, 300, seed=4)
    a = simulate(example, u, v, grid, ch, seed=4, record="all")
    b = simulate(example, u, v, grid, ch, seed=4, record="all")
    for name in ("x", "xhat", "xtilde", "u", "v", "running", "v_energy", "dW", "dWbar"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_many_matches_single(example, example_gains):
    u, v = outcome_policies(example_gains)
    grid = example_gains.grid
    ch = example_chains(example, grid, 300, seed=5)
    pairs = [(u, v), (u.scaled(1.2), v), (u, v.scaled(hat=0.8)), (ZeroControl(), v.shifted(0.1))]
    many = simulate_many(example, pairs, grid, ch, seed=5)
    for (c, d), got in zip(pairs, many):
        ref = simulate(example, c, d, grid, ch, seed=5)
        assert np.allclose(got.cost(1.0), ref.cost(1.0), rtol=1e-13, atol=1e-15)
        assert np.allclose(got.x, ref.x, rtol=1e-13, atol=1e-15)


def test_deterministic_case_matches_matrix_exponential():
    a, b1, k = 0.6, 1.0, -0.4
    m = scalar_model(A=a, B1=b1, xi=2.0)
    errs = []
    for step in (0.01, 0.005):
        grid = make_grid(0, 1, step)
        bat = simulate(m, LinearFeedbackControl([[k]]), ZeroDisturbance(), grid,
                       still_chains(3, 1.0))
        exact = expm(np.array([[a + b1 * k]])) @ [2.0]
        errs.append(abs(bat.x[-1, 0, 0] - exact[0]))
        assert np.all(bat.x[-1, :, 0] == bat.x[-1, 0, 0])
    assert errs[0] <= 0.01 * 2.0
    assert 1.8 <= errs[0] / errs[1] <= 2.2


def test_no_wbar_channel_means_no_filtering_error():
    m = scalar_model(A=0.3, B1=1.0, B2=0.5, C=0.4, D1=0.2, D2=0.1, Q=1.0, sigma=0.3,
                     D=2, generator=np.array([[-1.0, 1.0], [1.0, -1.0]]))
    grid = make_grid(0, 1, 1e-2)
    ch = sample_paths(m.generator, 0, 0.0, 1.0, 200, make_rng(1, 0))
    b = simulate(m, LinearFeedbackControl([[-0.5]]),
                 LinearFeedbackDisturbance([[0.2]], [[0.7]], [0.1]), grid, ch, record="all")
    assert not np.any(b.xtilde) and not np.any(b.vtilde)


def test_control_ignores_wbar():
    # Changing only the Wbar increments cannot move xhat or u.
    m = scalar_model(A=0.3, B1=1.0, B2=0.5, C=0.4, Cbar=0.5, D1bar=0.3, D2bar=0.2, Q=1.0)
    grid = make_grid(0, 1, 1e-2)
    rng = np.random.default_rng(0)
    dw = rng.standard_normal((grid.K, 100)) * 0.1
    u = LinearFeedbackControl([[-0.5]])
    v = LinearFeedbackDisturbance([[0.2]], [[0.7]])
    a = simulate(m, u, v, grid, still_chains(100, 1.0), record="all",
                 increments=(dw, rng.standard_normal(dw.shape) * 0.1))
    b = simulate(m, u, v, grid, still_chains(100, 1.0), record="all",
                 increments=(dw, rng.standard_normal(dw.shape) * 0.1))
    assert np.array_equal(a.xhat, b.xhat) and np.array_equal(a.u, b.u)
    assert not np.array_equal(a.xtilde, b.xtilde)


def test_control_policy_has_no_xtilde_term():
    m = scalar_model()
    with pytest.raises(ValueError):
        ControlPolicy(np.zeros((1, 2))).bind(m.dims, 11)


def test_unsupported_disturbance():
    m = scalar_model()
    grid = make_grid(0, 1, 0.1)
    with pytest.raises(UnsupportedDisturbance):
        simulate(m, ZeroControl(), lambda s, x: x, grid, still_chains(2, 1.0))


def test_open_loop_disturbance_has_no_tilde_part():
    m = scalar_model(A=0.1, B2=1.0, Cbar=0.5, Q=1.0)
    grid = make_grid(0, 1, 0.1)
    b = simulate(m, OpenLoopControl(lambda s: [s]), OpenLoopDisturbance(lambda s: [1.0 - s]),
                 grid, still_chains(20, 1.0), record="all")
    assert np.allclose(b.vhat[..., 0], (1.0 - grid.nodes)[:, None])
    assert not np.any(b.vtilde)
    assert np.allclose(b.u[..., 0], grid.nodes[:, None])


def test_euler_weak_order():
    a, c, cb = 0.5, 0.5, 0.5
    m = scalar_model(A=a, C=c, Cbar=cb)
    n, base = 100_000, 4
    rng = np.random.default_rng(11)
    fine = 4 * base
    dw = rng.standard_normal((2, fine, n)) * np.sqrt(1.0 / fine)
    est = []
    for K in (base, 2 * base, fine):
        r = fine // K
        inc = dw.reshape(2, K, r, n).sum(axis=2)
        b = simulate(m, ZeroControl(), ZeroDisturbance(), make_grid(0, 1, 1.0 / K),
                     still_chains(n, 1.0), increments=(inc[0], inc[1]))
        est.append(np.mean(b.x[-1, :, 0] ** 2))
    ratio = (est[0] - est[1]) / (est[1] - est[2])
    assert 1.5 <= ratio <= 3
    assert est[2] == pytest.approx(np.exp(2 * a + c * c + cb * cb), rel=0.1)


def test_filter_stats_small(example, example_gains):
    u, v = outcome_policies(example_gains)
    grid = example_gains.grid
    checkpoints = [0, 700, 1400, 2100, 2800, 3500]
    b = simulate(example, u, v, grid, example_chains(example, grid, 2000, seed=8), seed=8,
                 record=checkpoints)
    st = filter_consistency_stats(b)
    assert st.times.tolist() == pytest.approx(grid.nodes[checkpoints].tolist())
    assert st.mean_xtilde_norm[0] == 0 and st.cross[0] == 0
    assert st.passes()


def test_single_path_csv(example, example_solution, example_gains, tmp_path):
    from hinfswitch import sample_path
    u, v = outcome_policies(example_gains)
    ch = sample_path(example.generator, 0, 0.0, 3.5, make_rng(1, 0))
    p = simulate_path(example, u, v, example_solution.grid, ch, seed=1)
    p.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "s,regime,x_1,xhat_1,xtilde_1,u_1,v_1,vhat_1,vtilde_1"
    assert len(lines) == 1 + p.times.size
    assert p.times.size >= 3501


def test_saddle_control_reads_only_theta_hat1(example_gains):
    pol = SaddleControl(example_gains)
    assert isinstance(pol, ControlPolicy) and not hasattr(pol, "gain_tilde")
    assert isinstance(outcome_policies(example_gains)[1], DisturbancePolicy)
