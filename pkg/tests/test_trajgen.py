import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stl2vec.trajgen import (Mu0Params, ReactionNetwork, TrajectoryBatch, TrajectorySource, fit_standardizer,
                             immigration, load_network, monotonicity_changes, read_csv, sample_mu0, simulate_ssa,
                             sirs, standardize, total_variation, write_csv)


def test_mu0_shape_and_grid():
    b = sample_mu0(Mu0Params(dimension=2), 4, seed=1)
    assert b.values.shape == (4, 101, 2)
    assert np.array_equal(b.times, np.arange(101.0))


def test_mu0_deterministic_and_order_independent():
    p = Mu0Params()
    full = sample_mu0(p, 6, seed=3)
    assert np.array_equal(full.values, sample_mu0(p, 6, seed=3).values)
    tail = sample_mu0(p, 3, seed=3, start=3)
    assert np.array_equal(full.values[3:], tail.values)
    assert not np.array_equal(full.values, sample_mu0(p, 6, seed=4).values)


@pytest.mark.parametrize("kw", [dict(b=0.0), dict(dt=0.3), dict(init_std=0.0), dict(q=0.6), dict(dimension=0),
                                dict(sign_process="other")])
def test_mu0_invalid(kw):
    with pytest.raises(ValueError):
        Mu0Params(**kw)


def test_mu0_monotone_when_q_zero():
    b = sample_mu0(Mu0Params(q=0.0), 200, seed=5)
    assert np.all(monotonicity_changes(b.values) == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 1.0, 2.0]))
def test_mu0_total_variation_is_k(seed, tv_std):
    # increments come from order statistics on [0, K]: their sizes sum to K
    from stl2vec.rng import substream
    p = Mu0Params(tv_std=tv_std, dimension=2)
    b = sample_mu0(p, 1, seed)
    k = substream(seed, "mu0", 0)
    k.normal(size=2)
    expected = k.normal(0.0, tv_std, size=2) ** 2
    assert np.allclose(total_variation(b.values[0]), expected, rtol=0, atol=1e-12)


def test_mu0_mean_monotonicity_changes():
    b = sample_mu0(Mu0Params(dimension=1), 5000, seed=0)
    assert abs(monotonicity_changes(b.values).mean() - 17.818) <= 1.0


def test_mu0_mean_total_variation():
    b = sample_mu0(Mu0Params(dimension=1, tv_std=1.0), 5000, seed=0)
    assert abs(total_variation(b.values).mean() - 1.008) <= 0.1


def test_batch_validation():
    with pytest.raises(ValueError):
        TrajectoryBatch(np.array([0.0, 1.0, 3.0]), np.zeros((1, 3, 1)))
    with pytest.raises(ValueError):
        TrajectoryBatch(np.arange(2.0), np.array([[[np.inf], [0.0]]]))


def test_csv_round_trip(tmp_path):
    b = sample_mu0(Mu0Params(dimension=2, b=10.0), 3, seed=2)
    path = tmp_path / "t.csv"
    write_csv(path, b)
    assert path.read_text().splitlines()[0] == "traj_id,t,x0,x1"
    back = read_csv(path)
    assert np.array_equal(back.values, b.values)
    assert np.array_equal(back.times, b.times)


def test_csv_rejects_unsorted(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("traj_id,t,x0\n1,0,0\n1,1,0\n0,0,0\n0,1,0\n")
    with pytest.raises(ValueError):
        read_csv(path)


# -- SSA ---------------------------------------------------------------------

def test_immigration_mean():
    b = simulate_ssa(immigration(), 2000, seed=0)
    x50 = b.values[:, -1, 0]
    assert abs(x50.mean() - 50) <= 3 * np.sqrt(50) / np.sqrt(2000)


def test_sirs_conserves_population():
    b = simulate_ssa(sirs(), 200, seed=1)
    assert b.values.shape == (200, 34, 3)
    assert np.all(b.values.sum(axis=2) == 100)
    assert np.all(b.values >= 0)


def test_zero_rates_constant():
    net = ReactionNetwork(["A", "B"], [3, 4], [[1, 0]], [[0, 1]], [0.0], horizon=5)
    b = simulate_ssa(net, 5, seed=0)
    assert np.all(b.values == np.array([3.0, 4.0]))


def test_exhausted_reactant_holds_state():
    net = ReactionNetwork(["A"], [3], [[1]], [[0]], [50.0], horizon=10)
    b = simulate_ssa(net, 10, seed=0)
    assert np.all(b.values[:, -1, 0] == 0)


def test_waiting_times():
    net = immigration(rate=2.0, horizon=5000.0)
    b, events = simulate_ssa(net, 2, seed=4, return_events=True)
    mean_wait = 2 * 5000.0 / events.sum()
    assert events.sum() >= 10_000
    assert abs(mean_wait - 0.5) / 0.5 < 0.05


def test_ssa_runs_independent_of_batch():
    a = simulate_ssa(sirs(), 6, seed=9)
    b = simulate_ssa(sirs(), 2, seed=9, start=4)
    assert np.array_equal(a.values[4:], b.values)


def test_network_config_round_trip(tmp_path):
    net = sirs(beta=0.4)
    path = tmp_path / "n.json"
    path.write_text(json.dumps(net.to_config()))
    back = load_network(path)
    assert back.species == net.species
    assert np.array_equal(back.reactants, net.reactants)
    assert np.array_equal(back.products, net.products)
    assert np.allclose(back.rates, net.rates)
    sim_a = simulate_ssa(net, 3, seed=1).values
    assert np.array_equal(sim_a, simulate_ssa(back, 3, seed=1).values)


def test_network_config_counts():
    cfg = {"species": ["A", "B"], "init": {"A": 2}, "horizon": 4,
           "reactions": [{"reactants": {"A": 2}, "products": ["B"], "rate": 1.0}]}
    net = ReactionNetwork.from_config(cfg)
    assert net.init == [2.0, 0.0]
    # propensity of 2A -> B is k * C(A, 2)
    assert net.propensities(np.array([4.0, 0.0]))[0] == 6.0


def test_network_rejects_negative_rate():
    with pytest.raises(ValueError):
        ReactionNetwork(["A"], [0], [[0]], [[1]], [-1.0], horizon=1)


# -- standardization ---------------------------------------------------------

def test_standardize_sirs():
    z, tf = standardize(simulate_ssa(sirs(), 100, seed=0))
    flat = z.values.reshape(-1, 3)
    assert np.all(np.abs(flat.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(flat.std(axis=0) - 1) < 1e-9)
    assert tf.threshold_to_model_units(1, 0.0) == pytest.approx(tf.shift[1])


def test_standardize_identity_on_standardized():
    z, _ = standardize(sample_mu0(Mu0Params(), 50, seed=0))
    tf = fit_standardizer(z)
    assert np.all(np.abs(tf.shift) < 1e-9)
    assert np.all(np.abs(tf.scale - 1) < 1e-9)


def test_standardize_zero_variance():
    b = sample_mu0(Mu0Params(dimension=2), 10, seed=0)
    b.values[:, :, 1] = 1.0
    with pytest.raises(ValueError, match="zero pooled variance"):
        standardize(b)


def test_source_round_trip():
    src = TrajectorySource(network=sirs())
    back = TrajectorySource.from_dict(json.loads(json.dumps(src.to_dict())))
    assert np.array_equal(src.sample(4, 0, "x").values, back.sample(4, 0, "x").values)
    mu = TrajectorySource.from_dict({"kind": "mu0", "params": {"dimension": 2}})
    assert mu.dimension == 2
    assert TrajectorySource.from_dict({"kind": "network", "network": "immigration"}).name == "immigration"
