import numpy as np
import pytest

from poquim.errors import NumericalError
from poquim.information import FactoredOperand, QuimDecomposition, acm, poquim_ml, poquim_reml, reml_operands
from poquim.likelihood import reml_score_parts
from poquim.model import VarianceComponents, balanced_one_way, intercept_slope, one_way, two_way_crossed
from poquim._covariance import evaluate

from support import oneway_ml_parts, oneway_reml_i2, oneway_reml_parts, rel_err, sigma_r11


def _oneway_case(rng):
    m, n = int(rng.integers(3, 15)), int(rng.integers(2, 6))
    y = 2 * rng.standard_exponential(m * n) + np.repeat(rng.normal(size=m), n)
    th = VarianceComponents(rng.uniform(0.5, 2.0), [rng.uniform(0.1, 3.0)])
    return m, n, balanced_one_way(m, n, y), th, rng.normal()


@pytest.mark.parametrize("seed", range(3))
def test_oneway_reml_closed_forms(seed):
    m, n, M, th, mu = _oneway_case(np.random.default_rng(seed))
    D = poquim_reml(th, [mu], M)
    obs, est = oneway_reml_parts(th.lam, th.gamma[0], (M.y - mu).reshape(m, n))
    assert rel_err(D.observed, obs) < 1e-9
    assert rel_err(D.estimated, est) < 1e-9
    assert rel_err(D.i2, oneway_reml_i2(th.lam, th.gamma[0], m, n)) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_oneway_ml_closed_forms(seed):
    m, n, M, th, mu = _oneway_case(np.random.default_rng(50 + seed))
    D = poquim_ml(th, [mu], M)
    obs, est = oneway_ml_parts(th.lam, th.gamma[0], (M.y - mu).reshape(m, n))
    assert rel_err(D.observed, obs) < 1e-9
    assert rel_err(D.estimated, est) < 1e-9


def test_ml_gamma_gamma_estimated_entry_sign():
    m, n, g = 6, 3, 0.8
    D = poquim_ml(VarianceComponents(1.0, [g]), [0.0], balanced_one_way(m, n, np.ones(m * n)))
    assert D.estimated[2, 2] == pytest.approx(-m * n ** 2 / (4 * (1 + g * n) ** 2), rel=1e-12)


def test_crossed_lambda_entry_closed_form():
    rng = np.random.default_rng(1)
    m, n, lam, g1, g2, mu = 5, 4, 1.3, 0.7, 1.9, 0.3
    y = rng.standard_exponential(m * n) + rng.normal(size=m * n)
    D = poquim_reml(VarianceComponents(lam, [g1, g2]), [mu], two_way_crossed(m, n, y))
    u = (y - mu).reshape(m, n)
    l1 = -(1 - 1 / (1 + g1 * n)) / n
    l2 = -(1 - 1 / (1 + g2 * m)) / m
    l3 = (1 - 1 / (1 + g1 * n) - 1 / (1 + g2 * m)) / (m * n)
    t0 = 1 + l1 + l2 + l3
    t1 = (m - 1) * n / (m * (1 + g1 * n))
    t2 = m * (n - 1) / (n * (1 + g2 * m))
    a0 = t0 ** 2 / (4 * lam ** 4)
    a1 = (n * t0 ** 2 - t1 ** 2) / (4 * lam ** 4 * n * (n ** 3 - 1))
    a2 = (m * t0 ** 2 - t2 ** 2) / (4 * lam ** 4 * m * (m ** 3 - 1))
    t3 = (n * (1 + g2 + g1 * n) ** 2 - (1 + g1 + g2) ** 2) / (n ** 3 - 1)
    t4 = (m * (1 + g1 + g2 * m) ** 2 - (1 + g1 + g2) ** 2) / (m ** 3 - 1)
    S1 = (a0 + a1 + a2) * np.sum(u ** 4) - a1 * np.sum(u.sum(1) ** 4) - a2 * np.sum(u.sum(0) ** 4)
    S2 = ((m * n - 1) / (2 * lam ** 2) - 3 * m * n * t0 ** 2 / (4 * lam ** 2) * ((1 + g1 + g2) ** 2 - (t3 + t4))
          - 3 * (t1 ** 2 * t3 * m + t2 ** 2 * t4 * n) / (4 * lam ** 2))
    assert D.observed[0, 0] == pytest.approx(S1, rel=1e-9)
    assert D.estimated[0, 0] == pytest.approx(S2, rel=1e-9)


def test_sandwich_entry_formula():
    rng = np.random.default_rng(9)
    m, n, M, th, mu = _oneway_case(rng)
    D = poquim_reml(th, [mu], M)
    sig = acm(D, check_psd=False).sigma
    assert sig[1, 1] == pytest.approx(sigma_r11(D.total, D.i2), rel=1e-9)


def test_factored_operands_match_dense_score_matrices():
    rng = np.random.default_rng(4)
    M = intercept_slope(rng.uniform(1, 2, 4), rng.normal(size=8))
    th = VarianceComponents(1.2, [0.5, 0.9])
    ops = reml_operands(evaluate(M, th.lam, th.gamma))
    B = reml_score_parts(th, M).B
    for op, Bj in zip(ops, B):
        assert np.allclose(op.dense(M.N), Bj, atol=1e-13)
        i = np.array([0, 3, 5])
        j = np.array([0, 1, 7])
        assert np.allclose(op.entries(i, j), Bj[i, j], atol=1e-13)


def test_factored_operand_cell_sums():
    from scipy import sparse
    rng = np.random.default_rng(0)
    U = rng.normal(size=(6, 2))
    G = np.array([[1.0, 0.3], [0.3, 2.0]])
    op = FactoredOperand(0.5, [(U, U @ G, 1.5)])
    E = sparse.csr_matrix(np.array([[1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 1, 0]], dtype=float))
    A = op.dense(6)
    assert np.allclose(op.cell_sums(E), (E @ A @ E.T).diagonal())


def test_decompositions_are_symmetric():
    rng = np.random.default_rng(5)
    M = one_way([2, 3, 4, 2], rng.normal(size=11))
    th = VarianceComponents(1.1, [0.6])
    for D in (poquim_reml(th, [0.1], M), poquim_ml(th, [0.1], M)):
        assert np.allclose(D.total, D.total.T)
        assert np.allclose(D.i2, D.i2.T)


def test_acm_rejects_indefinite_and_singular():
    neg = QuimDecomposition(-np.eye(2), np.zeros((2, 2)), -np.eye(2), -np.eye(2), 2)
    with pytest.raises(NumericalError):
        acm(neg)
    assert np.allclose(acm(neg, check_psd=False).sigma, -np.eye(2))
    sing = QuimDecomposition(np.eye(2), np.zeros((2, 2)), np.eye(2), np.array([[1.0, 1.0], [1.0, 1.0]]), 2)
    with pytest.raises(NumericalError):
        acm(sing)


def test_acm_symmetrizes_tiny_negative_eigenvalues():
    tot = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-14]])
    D = QuimDecomposition(tot, np.zeros((2, 2)), tot, -np.eye(2), 2)
    sig = acm(D).sigma
    assert np.array_equal(sig, sig.T)
