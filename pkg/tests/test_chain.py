import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hinfswitch import (ChainBatch, ChainPath, make_rng, regime_at, sample_path, sample_paths,
                        stationary_distribution, transition_matrix)
from hinfswitch.chain import write_path_csv

LAM = np.array([[-1.0, 1.0], [2.0, -2.0]])


def test_transition_matrix_closed_form():
    Pm = transition_matrix(LAM, 0.1)
    assert Pm[0, 0] == pytest.approx((2 + math.exp(-0.3)) / 3, abs=1e-14)
    assert Pm[1, 1] == pytest.approx((1 + 2 * math.exp(-0.3)) / 3, abs=1e-14)


def test_transition_matrix_zero_step():
    assert np.array_equal(transition_matrix(LAM, 0.0), np.eye(2))
    with pytest.raises(ValueError):
        transition_matrix(LAM, -1.0)


@given(st.integers(2, 6), st.floats(0.0, 5.0), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_transition_rows_sum_to_one(D, dt, seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.05, 4.0, (D, D))
    np.fill_diagonal(lam, 0.0)
    np.fill_diagonal(lam, -lam.sum(axis=1))
    Pm = transition_matrix(lam, dt)
    assert np.allclose(Pm.sum(axis=1), 1.0, atol=1e-12, rtol=0)
    assert np.all(Pm >= -1e-14)


def test_stationary_distribution():
    assert np.allclose(stationary_distribution(LAM), [2 / 3, 1 / 3], atol=1e-14)


def test_single_path_invariants():
    p = sample_path(LAM, 0, 0.0, 20.0, make_rng(5, 0))
    assert p.states[0] == 0
    assert np.all(np.diff(p.jump_times) > 0)
    assert np.all(p.states[1:] != p.states[:-1])
    assert p.counts.sum() == len(p.jump_times)
    assert p.occupancy().sum() == pytest.approx(20.0)


def test_regime_lookup_conventions():
    p = ChainPath(0.0, 2.0, np.array([0.5, 1.2]), np.array([0, 1, 0]), 2)
    assert regime_at(p, 0.0) == 0
    assert regime_at(p, 0.5) == 1
    assert regime_at(p, 0.5, left=True) == 0
    assert regime_at(p, 1.2, left=True) == 1
    assert regime_at(p, 2.0) == 0
    with pytest.raises(ValueError):
        regime_at(p, 2.5)
    flat = ChainPath(0.0, 1.0, np.array([]), np.array([1]), 2)
    assert all(regime_at(flat, s) == 1 for s in np.linspace(0, 1, 11))


def test_chain_path_rejects_bad_data():
    with pytest.raises(ValueError):
        ChainPath(0.0, 1.0, np.array([0.5]), np.array([0, 0]), 2)
    with pytest.raises(ValueError):
        ChainPath(0.0, 1.0, np.array([0.6, 0.4]), np.array([0, 1, 0]), 2)
    with pytest.raises(ValueError):
        ChainPath(0.0, 1.0, np.array([0.5]), np.array([0]), 2)


def test_sampling_is_reproducible():
    a = sample_paths(LAM, 0, 0.0, 3.5, 500, make_rng(9, 0))
    b = sample_paths(LAM, 0, 0.0, 3.5, 500, make_rng(9, 0))
    assert np.array_equal(a.jump_times, b.jump_times) and np.array_equal(a.states, b.states)


def test_batch_roundtrip_and_lookup():
    batch = sample_paths(LAM, 1, 0.0, 3.0, 200, make_rng(2, 0))
    again = ChainBatch.from_paths([batch.path(p) for p in range(len(batch))])
    assert np.array_equal(again.regimes_at(1.7), batch.regimes_at(1.7))
    for p in range(20):
        assert batch.regimes_at(1.7)[p] == regime_at(batch.path(p), 1.7)


def test_stationary_occupancy():
    batch = sample_paths(LAM, 0, 0.0, 200.0, 400, make_rng(3, 0))
    occ = np.array([batch.path(p).occupancy() for p in range(len(batch))]).sum(axis=0)
    assert occ[0] / occ.sum() == pytest.approx(2 / 3, abs=0.02)


def test_grid_fraction_in_state_one():
    batch = sample_paths(LAM, 0, 0.0, 30.0, 2000, make_rng(4, 0))
    nodes = np.linspace(5.0, 30.0, 51)
    frac = np.mean([np.mean(batch.regimes_at(s) == 0) for s in nodes])
    assert frac == pytest.approx(2 / 3, abs=0.02)


def test_compensated_counts_are_centred():
    batch = sample_paths(LAM, 0, 0.0, 3.5, 10_000, make_rng(6, 0))
    comp = np.array([batch.path(p).compensated_counts(LAM) for p in range(len(batch))])
    for i, j in ((0, 1), (1, 0)):
        x = comp[:, i, j]
        assert abs(x.mean()) <= 3 * x.std(ddof=1) / math.sqrt(x.size)


def test_path_csv(tmp_path):
    p = ChainPath(0.0, 2.0, np.array([0.5]), np.array([0, 1]), 2)
    write_path_csv(p, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["s,regime", "0.0,1", "0.5,1", "0.5,2", "2.0,2"]
