import numpy as np
import pytest

from stl2vec.formulagen import FormulaDistParams, sample_formulae
from stl2vec.logic import GE, Atom, Eventually, Not, robustness
from stl2vec.kernel import (MonitorError, cosine_normalize, cross_kernel, gram, read_matrix_csv,
                            robustness_matrix, write_matrix_csv)
from stl2vec.trajgen import Mu0Params, sample_mu0


@pytest.fixture(scope="module")
def data():
    fs = sample_formulae(FormulaDistParams(), 40, seed=0)
    trajs = sample_mu0(Mu0Params(), 500, seed=0)
    return fs, trajs, robustness_matrix(fs, trajs)


def test_single_atom_entry():
    trajs = sample_mu0(Mu0Params(dimension=1, init_mean=5.0), 1, seed=0)
    rm = robustness_matrix([Atom(0, GE, 0)], trajs)
    assert rm.values[0, 0] == np.tanh(trajs.values[0, 0, 0])


def test_matches_one_at_a_time_monitor():
    fs = sample_formulae(FormulaDistParams(), 10, seed=1)
    trajs = sample_mu0(Mu0Params(), 10, seed=1)
    rm = robustness_matrix(fs, trajs)
    oracle = np.array([[robustness(f, tr.values) for tr in trajs] for f in fs])
    assert np.array_equal(rm.values, oracle)


def test_negated_rows(data):
    fs, trajs, rm = data
    neg = robustness_matrix([Not(f) for f in fs], trajs)
    assert np.array_equal(neg.values, -rm.values)


def test_threads_do_not_change_result(data):
    fs, trajs, rm = data
    assert np.array_equal(robustness_matrix(fs, trajs, threads=4).values, rm.values)


def test_monitor_error_names_formula():
    trajs = sample_mu0(Mu0Params(dimension=1), 3, seed=0)
    with pytest.raises(MonitorError) as exc:
        robustness_matrix([Atom(0, GE, 0), Atom(2, GE, 0)], trajs)
    assert exc.value.formula_index == 1


def test_gram_estimator(data):
    _, _, rm = data
    k = gram(rm).values
    direct = np.array([[np.mean(a * b) for b in rm.values] for a in rm.values])
    assert np.allclose(k, direct, atol=1e-15)
    assert np.array_equal(k, k.T)
    assert np.all(np.diag(k) >= 0)


def test_gram_psd(data):
    _, _, rm = data
    w = np.linalg.eigvalsh(gram(rm).values)
    assert w[0] >= -1e-8 * w[-1]


def test_gram_negation_exact(data):
    fs, trajs, rm = data
    pair = robustness_matrix([fs[3], Not(fs[3])], trajs)
    k = gram(pair).values
    assert k[0, 1] == -k[0, 0]


def test_saturated_atom_kernel():
    trajs = sample_mu0(Mu0Params(), 10_000, seed=0)
    k = gram(robustness_matrix([Atom(0, GE, -100)], trajs)).values[0, 0]
    assert 0.99 <= k <= 1.0


def test_gram_metadata(data):
    _, _, rm = data
    g = gram(rm)
    assert g.metadata["robustness_hash"] == rm.hash
    assert g.metadata["M"] == 500


def test_cosine_normalize(data):
    _, _, rm = data
    k = gram(rm, normalize=True).values
    assert np.allclose(np.diag(k), 1.0)
    assert np.all(np.abs(k) <= 1 + 1e-12)
    raw = gram(rm).values
    assert np.allclose(cosine_normalize(raw), k)


def test_cross_kernel_train_equals_gram(data):
    fs, trajs, rm = data
    # gram() symmetrizes, which may move the last bit
    assert np.max(np.abs(cross_kernel(fs, rm, trajs) - gram(rm).values)) < 1e-15


def test_cross_kernel_negation(data):
    fs, trajs, rm = data
    row = cross_kernel([Not(fs[5])], rm, trajs)[0]
    assert np.array_equal(row, -cross_kernel([fs[5]], rm, trajs)[0])


def test_cross_kernel_oracle(data):
    fs, trajs, rm = data
    test = [Eventually(0, 3, Atom(1, GE, 0.2)), Not(Atom(2, GE, -0.4))]
    rows = cross_kernel(test, rm, trajs)
    for t, psi in enumerate(test):
        r = np.array([robustness(psi, tr.values) for tr in trajs])
        for i in range(len(fs)):
            assert rows[t, i] == pytest.approx(np.dot(r, rm.values[i]) / len(trajs), abs=1e-14)


def test_cross_kernel_dimension_mismatch(data):
    fs, trajs, rm = data
    with pytest.raises(ValueError):
        cross_kernel(fs[:2], rm, trajs[:10])


def test_estimator_convergence():
    fs = sample_formulae(FormulaDistParams(), 30, seed=2)
    t10 = sample_mu0(Mu0Params(), 10_000, seed=3)
    r10 = robustness_matrix(fs, t10).values
    r5 = r10[:, :5000]
    k5, k10 = r5 @ r5.T / 5000, r10 @ r10.T / 10_000
    prod = r5[:, None, :] * r5[None, :, :]
    bound = 3 * prod.std(axis=2) / np.sqrt(5000)
    assert np.mean(np.abs(k10 - k5) <= bound) >= 0.99


def test_semantic_consistency():
    fs = sample_formulae(FormulaDistParams(), 200, seed=4)
    rm = robustness_matrix(fs, sample_mu0(Mu0Params(), 2000, seed=4))
    k = gram(rm).values
    iu = np.triu_indices(200, 1)
    d_rob = np.sqrt(((rm.values[:, None, :] - rm.values[None, :, :]) ** 2).sum(axis=2))[iu]
    d_ker = np.sqrt(np.maximum(np.diag(k)[:, None] + np.diag(k)[None, :] - 2 * k, 0))[iu]
    assert np.corrcoef(d_rob, d_ker)[0, 1] > 0.95


def test_matrix_csv_round_trip(tmp_path, data):
    _, _, rm = data
    path = tmp_path / "g.csv"
    write_matrix_csv(path, gram(rm).values)
    assert np.array_equal(read_matrix_csv(path), gram(rm).values)
