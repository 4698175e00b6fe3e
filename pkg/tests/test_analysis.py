import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import kolmogorov

from stl2vec.analysis import (DatasetSpec, ExplanationReport, _assign_group, _kolmogorov_sf, best_assignment,
                              build_dataset, centroid_accuracy, cosine, explain_dataset, explain_group3,
                              explain_pc0, group3_statistics, ks_statistic, match_axes, pearson,
                              probe_coordinates, quantile_table, quantiles, shuffled_control,
                              single_variable_labels, stability_study, write_quantile_table, write_scatter_csv)
from stl2vec.formulagen import FormulaDistParams, sample_formulae
from stl2vec.kernel import robustness_matrix
from stl2vec.logic import GE, LE, Always, And, Atom, Eventually, Not, Truth
from stl2vec.trajgen import Mu0Params, sample_mu0


def two_pass_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


# -- statistics --------------------------------------------------------------

def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson(x, x) == 1.0
    assert pearson(x, -x) == -1.0
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)


def test_pearson_matches_textbook(rng):
    for _ in range(20):
        x, y = rng.normal(size=100), rng.normal(size=100)
        assert abs(pearson(x, y) - two_pass_pearson(list(x), list(y))) < 1e-12


def test_pearson_errors():
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [1])


@given(arrays(float, 12, elements=st.floats(-10, 10)), st.floats(0.1, 5), st.floats(-5, 5))
def test_pearson_affine_invariance(x, a, b):
    y = np.sin(np.arange(12.0))
    if np.ptp(x) < 1e-3:
        return
    assert pearson(a * x + b, y) == pytest.approx(pearson(x, y), abs=1e-9)


def test_cosine():
    u = np.array([1.0, -2.0, 3.0])
    assert cosine(u, u) == pytest.approx(1.0)
    assert cosine(u, -u) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        cosine(u, np.zeros(3))


def test_quantiles():
    assert quantiles([1, 2, 3, 4], [0.5])[0] == 2.5
    assert list(quantiles(np.arange(101.0))) == [1.0, 25.0, 50.0, 75.0, 99.0]
    with pytest.raises(ValueError):
        quantiles([])


def test_ks_identical():
    x = np.random.default_rng(0).normal(size=300)
    d, p = ks_statistic(x, x)
    assert d == 0.0 and p == 1.0


def test_ks_shifted(rng):
    d, p = ks_statistic(rng.normal(size=500), rng.normal(1.0, size=500))
    assert d > 0.3 and p < 1e-10


def test_ks_matches_scipy(rng):
    from scipy.stats import ks_2samp
    x, y = rng.normal(size=200), rng.normal(0.15, size=300)
    d, p = ks_statistic(x, y)
    ref = ks_2samp(x, y, method="asymp")
    assert d == pytest.approx(ref.statistic, abs=1e-12)
    # scipy applies a small-sample correction to the argument; compare to the plain asymptotic form
    en = math.sqrt(200 * 300 / 500)
    assert p == pytest.approx(kolmogorov(en * d), abs=1e-12)


@pytest.mark.parametrize("x", [0.05, 0.2, 0.5, 0.8, 1.0, 1.36, 2.0, 3.0])
def test_kolmogorov_tail(x):
    assert _kolmogorov_sf(x) == pytest.approx(kolmogorov(x), abs=1e-12)


def test_best_assignment_exhaustive_vs_hungarian(rng):
    for _ in range(20):
        s = rng.random((5, 7))
        perm = best_assignment(s)
        assert len(set(perm)) == 5
        from scipy.optimize import linear_sum_assignment
        r, c = linear_sum_assignment(s, maximize=True)
        assert s[np.arange(5), perm].sum() == pytest.approx(s[r, c].sum())
    big = rng.random((10, 10))
    assert sorted(best_assignment(big)) == list(range(10))


def test_assign_group_is_bijective(rng):
    coords = rng.normal(size=(200, 5))
    stats = [coords[:, 3] + 0.1 * rng.normal(size=200), coords[:, 1], coords[:, 2] * 2]
    rep = _assign_group(coords, stats, ["a", "b", "c"], 1, "g")
    assert [(pc, name) for pc, name, _, _ in rep.rows] == [(1, "b"), (2, "c"), (3, "a")]
    assert all(r > 0.9 for r in rep.scores("g"))


# -- explanations ------------------------------------------------------------

def test_explain_pc0_on_medians():
    fs = sample_formulae(FormulaDistParams(), 50, seed=0)
    rm = robustness_matrix(fs, sample_mu0(Mu0Params(), 300, seed=0))
    med = np.median(rm.values, axis=1)
    r, rep = explain_pc0(med[:, None], rm=rm)
    assert r == pytest.approx(1.0)
    assert rep.rows[0][:2] == (0, "median_robustness")


def test_group3_zero_without_variable():
    trajs = sample_mu0(Mu0Params(), 50, seed=0)
    fs = [Always(0, 3, Atom(0, GE, 0.1)), And(Atom(1, LE, 0.5), Eventually(0, 2, Atom(0, GE, -1)))]
    stats = group3_statistics(fs, trajs, 3)
    assert stats[2][0] == 0.0 and stats[2][1] == 0.0
    assert stats[1][0] == 0.0
    assert stats[0][0] > 0 and stats[1][1] > 0
    signed = group3_statistics(fs, trajs, 3, signed=True)
    assert np.all(np.abs(signed[0]) <= stats[0] + 1e-15)


def test_group3_requires_trajectories():
    trajs = sample_mu0(Mu0Params(), 20, seed=0)
    with pytest.raises(ValueError):
        explain_group3(np.zeros((1, 7)), [Atom(0, GE, 0)], trajs, 3)


@pytest.fixture(scope="module")
def small_dataset():
    spec = DatasetSpec(D=300, M=2000, d=13, seed=3)
    return build_dataset(spec)


def test_explain_dataset_structure(small_dataset):
    rep = explain_dataset(small_dataset, n_traj=1000, per_variable=200)
    pcs = [r[0] for r in rep.rows]
    assert pcs == list(range(7))
    assert [r[3] for r in rep.rows] == ["pc0"] + ["group2"] * 3 + ["group3"] * 3
    assert rep.scores("pc0")[0] >= 0.95
    assert np.all((0 <= rep.scores()) & (rep.scores() <= 1))


def test_negative_control(small_dataset):
    shuffled = shuffled_control(small_dataset.coords, 0)
    fs = small_dataset.formulae
    r, _ = explain_pc0(shuffled, rm=small_dataset.rm)
    assert r < 0.2
    stats = group3_statistics(fs, sample_mu0(Mu0Params(), 1000, seed=5), 3)
    rep = _assign_group(shuffled, stats, ["a", "b", "c"], 4, "group3")
    assert np.all(rep.scores() < 0.2)


def test_self_stability(small_dataset):
    probes = sample_formulae(FormulaDistParams(), 100, seed=11)
    z = probe_coordinates(small_dataset, probes)
    sims = stability_study([z, z])
    assert np.allclose(sims, 1.0)


def test_tautology_and_contradiction(small_dataset):
    ds = small_dataset
    z = probe_coordinates(ds, [Truth(), Not(Truth())])
    orient = np.sign(pearson(ds.coords[:, 0], np.median(ds.rm.values, axis=1)))
    assert orient * z[0, 0] > 0 > orient * z[1, 0]
    q1, q3 = np.percentile(ds.coords[:, 1:4], [25, 75], axis=0)
    assert np.all(np.abs(z[:, 1:4]) < q3 - q1)


def test_match_axes_permutation(rng):
    a = rng.normal(size=(50, 4))
    perm = [2, 0, 3, 1]
    cols, sims = match_axes(a, -a[:, perm] * 3.0)
    assert list(np.array(perm)[cols]) == [0, 1, 2, 3]
    assert np.allclose(sims, 1.0)
    with pytest.raises(ValueError):
        match_axes(a, a[:10])


def test_single_variable_labels_and_centroids():
    fs = [Atom(0, GE, 0), Not(Atom(2, LE, 1)), And(Atom(0, GE, 0), Atom(1, GE, 0))]
    assert list(single_variable_labels(fs)) == [0, 2, -1]
    pts = np.array([[0.0, 0], [0.1, 0], [5, 5], [5.1, 5]])
    assert centroid_accuracy(pts, np.array([0, 0, 1, 1])) == 1.0


def test_report_and_tables_csv(tmp_path, small_dataset):
    rep = ExplanationReport([(0, "median_robustness", 0.5, "pc0")])
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["pc,statistic,abs_r,group", "0,median_robustness,0.5,pc0"]
    rows = quantile_table({"p": {0: [0.1, 0.2, 0.3]}})
    write_quantile_table(tmp_path / "q.csv", rows)
    assert (tmp_path / "q.csv").read_text().splitlines()[0] == "setting,pc,1perc,1quart,median,3quart,99perc"
    write_scatter_csv(tmp_path / "s.csv", small_dataset.coords, small_dataset.formulae, (0, 1))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "pc0,pc1,formula_class" and len(lines) == 301
