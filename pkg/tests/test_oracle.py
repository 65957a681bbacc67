import numpy as np
import pytest

from poquim.errors import ConfigError
from poquim.information import poquim_reml
from poquim.model import VarianceComponents, balanced_one_way, intercept_slope, two_way_crossed
from poquim.oracle import (HigherMoments, _ml_C, _reml_B, analytic_quim_ml, analytic_quim_reml,
                           distribution_moments, gaussian_information, mc_score_variance,
                           trace_information)
from poquim.simulation import DistributionSpec

from support import random_model, random_theta, rel_err


def test_distribution_moments():
    v, third, kappa = distribution_moments(("centered-exponential", ()), 2.0)
    assert (v, third, kappa) == pytest.approx((2.0, 2 * 2.0 ** 1.5, 6 * 4.0))
    assert distribution_moments(("double-exponential", ()), 3.0) == pytest.approx((3.0, 0.0, 27.0))
    assert distribution_moments(("normal", ()), 5.0) == pytest.approx((5.0, 0.0, 0.0))
    v, third, kappa = distribution_moments(DistributionSpec.parse("NM(-2,2,0.5)"), 5.0)
    assert third == pytest.approx(0.0, abs=1e-15)
    # unscaled mixture variance is 1 + 4 = 5, so scaling to 5 leaves it unchanged
    assert kappa == pytest.approx(0.5 * (16 + 24 + 3) + 0.5 * (16 + 24 + 3) - 3 * 25)


def test_moments_validation():
    with pytest.raises(ConfigError):
        HigherMoments([-10.0], [0.0], [1.0])
    with pytest.raises(ConfigError):
        HigherMoments([0.0, 0.0], [0.0], [1.0])


def test_column_sum_and_trace_forms_agree():
    rng = np.random.default_rng(0)
    for _ in range(5):
        M = random_model(rng)
        th = random_theta(rng, M.s)
        B, _, V = _reml_B(th, M)
        assert rel_err(gaussian_information(B, th, M), trace_information(B, V)) < 1e-10
        C, _, V, _ = _ml_C(th, M)
        assert rel_err(gaussian_information(C, th, M), trace_information(C, V)) < 1e-10


def test_zero_kurtosis_is_gaussian_information():
    rng = np.random.default_rng(1)
    M = random_model(rng)
    th = random_theta(rng, M.s)
    mom = HigherMoments(np.zeros(M.s + 1), np.zeros(M.s + 1), th.sigma2())
    B, _, V = _reml_B(th, M)
    assert rel_err(analytic_quim_reml(th, mom, M), trace_information(B, V)) < 1e-10


def test_ml_blocks():
    rng = np.random.default_rng(2)
    M = random_model(rng)
    th = random_theta(rng, M.s)
    beta = rng.normal(size=M.p)
    sym = HigherMoments(np.ones(M.s + 1), np.zeros(M.s + 1), th.sigma2())
    Q = analytic_quim_ml(th, beta, sym, M)
    p = M.p
    assert np.all(Q[:p, p:] == 0)
    _, _, _, Vi = _ml_C(th, M)
    assert rel_err(Q[:p, :p], M.X.T @ Vi @ M.X) < 1e-10
    ev = np.linalg.eigvalsh(analytic_quim_reml(th, sym, M))
    assert ev[0] >= -1e-10 * ev[-1]


def _fourth_moment(weights, kappa, var):
    """E(sum_k w_k X_k)^4 for independent zero-mean X_k given kappa_k, var_k."""
    w = np.asarray(weights, dtype=float)
    return float(np.sum(w ** 4 * kappa) + 3 * np.sum(w ** 2 * var) ** 2)


def test_crossed_estimated_part_is_quim_minus_expected_observed_part():
    m, n, lam, g1, g2 = 4, 3, 1.2, 0.8, 1.5
    M = two_way_crossed(m, n, np.zeros(m * n))
    th = VarianceComponents(lam, [g1, g2])
    laws = ["centered-exponential", "double-exponential", "centered-exponential"]
    mom = HigherMoments.from_laws([(f, ()) for f in laws], th.sigma2())
    exact = analytic_quim_reml(th, mom, M)
    k0, k1, k2 = mom.kappa
    s0, s1, s2 = th.sigma2()
    # expectations of the three power sums, all indices grouped by independent terms
    e_cell = _fourth_moment([1, 1, 1], [k0, k1, k2], [s0, s1, s2])
    e_row = _fourth_moment([1] * n + [n] + [1] * n, [k0] * n + [k1] + [k2] * n, [s0] * n + [s1] + [s2] * n)
    e_col = _fourth_moment([1] * m + [1] * m + [m], [k0] * m + [k1] * m + [k2], [s0] * m + [s1] * m + [s2])
    expected_sums = {"cell": m * n * e_cell, "row": m * e_row, "col": n * e_col}
    # the observed part is linear in (sum u^4, sum_i (sum_j u)^4, sum_j (sum_i u)^4); recover the
    # coefficients from three synthetic residual vectors
    D0 = poquim_reml(th, [0.0], M)

    def obs(u):
        return poquim_reml(th, [0.0], M.with_response(u.ravel())).observed[0, 0]

    rng = np.random.default_rng(3)
    U = [rng.normal(size=(m, n)) for _ in range(3)]
    A = np.array([[np.sum(u ** 4), np.sum(u.sum(1) ** 4), np.sum(u.sum(0) ** 4)] for u in U])
    coef = np.linalg.solve(A, [obs(u) for u in U])
    e_obs = coef @ [expected_sums["cell"], expected_sums["row"], expected_sums["col"]]
    assert D0.estimated[0, 0] == pytest.approx(exact[0, 0] - e_obs, rel=1e-8)


def test_mc_score_variance_matches_analytic():
    th = VarianceComponents(1.0, [1.0])
    M = balanced_one_way(2, 2)
    laws = ["double-exponential", "double-exponential"]
    mom = HigherMoments.from_laws([(f, ()) for f in laws], th.sigma2())
    cov, se = mc_score_variance(th, [1.0], M, laws, reps=100000, seed=1)
    z = (cov - analytic_quim_reml(th, mom, M)) / se
    assert np.max(np.abs(z)) <= 4
    again, _ = mc_score_variance(th, [1.0], M, laws, reps=100000, seed=1)
    assert np.array_equal(cov, again)


def test_mc_score_variance_gaussian_and_ml():
    th = VarianceComponents(0.8, [0.5, 1.2])
    M = intercept_slope([1.0, 2.0, 0.5])
    cov, se = mc_score_variance(th, [0.3, -0.2], M, ["normal"] * 3, reps=50000, seed=2)
    B, _, V = _reml_B(th, M)
    assert np.max(np.abs((cov - trace_information(B, V)) / se)) <= 4
    laws = ["centered-exponential"] * 3
    mom = HigherMoments.from_laws([(f, ()) for f in laws], th.sigma2())
    cov, se = mc_score_variance(th, [0.3, -0.2], M, laws, reps=50000, seed=3, kind="ml")
    assert np.max(np.abs((cov - analytic_quim_ml(th, [0.3, -0.2], mom, M)) / se)) <= 4
    with pytest.raises(ConfigError):
        mc_score_variance(th, [0.0, 0.0], M, laws, reps=10)
