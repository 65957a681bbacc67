"""Robust dispersion tests on the variance components and the delete-group
jackknife baseline for the balanced one-way layout."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ConfigError, DataError, NumericalError
from .information import AcmEstimate, acm, poquim_reml
from .likelihood import FitOptions, FitResult, fit_reml, fit_reml_constrained
from .model import ModelSpec

DEFAULT_LEVELS = (0.01, 0.05, 0.10)


def chi2_upper_tail(x: float, r: int) -> float:
    """``P(chi^2_r > x)``."""
    if r < 1:
        raise ConfigError("chi-square degrees of freedom must be >= 1")
    if x <= 0:
        return 1.0
    return float(special.gammaincc(0.5 * r, 0.5 * x))


def student_t_two_sided(t: float, df: float) -> float:
    """``P(|T_df| > |t|)``."""
    if df <= 0:
        raise ConfigError("t degrees of freedom must be positive")
    t = abs(float(t))
    if t == 0:
        return 1.0
    if np.isinf(t):
        return 0.0
    return float(special.betainc(0.5 * df, 0.5, df / (df + t * t)))


@dataclass(frozen=True, eq=False)
class Hypothesis:
    """``H0: K'theta = phi`` with K of shape (s+1, r) and full column rank."""

    K: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim == 1:
            K = K[:, None]
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if K.shape[1] != phi.size:
            raise ConfigError(f"K has {K.shape[1]} columns but phi has {phi.size} entries")
        if K.shape[1] == 0 or np.linalg.matrix_rank(K) < K.shape[1]:
            raise ConfigError("K must have full column rank")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "phi", phi)

    @property
    def r(self) -> int:
        return self.K.shape[1]

    def pinned_components(self) -> dict:
        """Coordinates of theta fixed by H0: those with ``e_j`` in the span of K."""
        pinned = {}
        for j in range(self.K.shape[0]):
            e = np.zeros(self.K.shape[0])
            e[j] = 1.0
            a, *_ = np.linalg.lstsq(self.K, e, rcond=None)
            if np.linalg.norm(self.K @ a - e) <= 1e-10:
                pinned[j] = float(a @ self.phi)
        return pinned


@dataclass(frozen=True, eq=False)
class TestResult:
    statistic: float
    df: float
    p_value: float
    reject_at: dict = field(default_factory=dict)
    method: str = "poquim-chi2"


def _decide(p, levels):
    return {float(a): bool(p < a) for a in levels}


def dispersion_test(fit: FitResult, acm_est: AcmEstimate, h: Hypothesis,
                    levels=DEFAULT_LEVELS) -> TestResult:
    """``(K'theta - phi)' (K' Sigma K)^{-1} (K'theta - phi)`` against chi^2_r."""
    theta = fit.theta_hat.as_vector()
    if h.K.shape[0] != theta.size:
        raise ConfigError(f"K has {h.K.shape[0]} rows, expected s+1 = {theta.size}")
    d = h.K.T @ theta - h.phi
    A = h.K.T @ acm_est.sigma @ h.K
    try:
        c = np.linalg.cholesky(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("K' Sigma K is not positive definite") from exc
    z = np.linalg.solve(c, d)
    stat = float(z @ z)
    p = chi2_upper_tail(stat, h.r)
    return TestResult(stat, h.r, p, _decide(p, levels), "poquim-chi2")


def twoway_equal_variance_test(fit: FitResult, acm_est: AcmEstimate,
                               levels=DEFAULT_LEVELS) -> TestResult:
    """``H0: gamma_1 = gamma_2`` for a two-factor model."""
    if fit.theta_hat.s != 2:
        raise ConfigError("the equal-variance test needs exactly two random factors")
    return dispersion_test(fit, acm_est, Hypothesis([0.0, 1.0, -1.0], [0.0]), levels)


def poquim_test(model: ModelSpec, h: Hypothesis, null_substitution: bool = True,
                options: FitOptions | None = None, levels=DEFAULT_LEVELS, fit=None):
    """Fit, assemble the POQUIM and test ``h``.

    With ``null_substitution`` the components fixed by H0 are set to their
    hypothesized values in the POQUIM and the remaining components are
    re-estimated by REML under H0; the numerator always uses the
    unconstrained REML estimate.

    Returns ``(TestResult, fit, acm)``.
    """
    if h.K.shape[0] != model.s + 1:
        raise ConfigError(f"K has {h.K.shape[0]} rows, expected s+1 = {model.s + 1}")
    fit = fit or fit_reml(model, options)
    theta_q, beta_q = fit.theta_hat, fit.beta_hat
    if null_substitution:
        pinned = h.pinned_components()
        if pinned:
            null_fit = fit_reml_constrained(model, pinned, options)
            theta_q, beta_q = null_fit.theta_hat, null_fit.beta_hat
    decomp = poquim_reml(theta_q, beta_q, model)
    # only K' Sigma K has to be positive definite for the statistic
    est = acm(decomp, check_psd=False)
    return dispersion_test(fit, est, h, levels), fit, est


# -- jackknife -----------------------------------------------------------------

def _log_ratio(ssa, sse, m, n):
    msa = ssa / (m - 1)
    mse = sse / (m * (n - 1))
    if not (msa > 0 and mse > 0):
        raise DataError("a mean square is not positive; log(MSA/MSE) is undefined")
    return np.log(msa / mse)


def jackknife_oneway_test(data, gamma0: float, n: int | None = None,
                          levels=DEFAULT_LEVELS) -> TestResult:
    """Delete-group jackknife of ``log(MSA/MSE)`` for ``H0: gamma_1 = gamma0``.

    ``data`` is an (m, n) array (one row per group) or a flat vector with
    group size ``n``.  Leave-one-group-out mean squares come from group sums
    and sums of squares, so each deletion costs O(1).
    """
    y = np.asarray(data, dtype=float)
    if y.ndim == 1:
        if n is None or y.size % n:
            raise ConfigError("a flat response needs a group size dividing its length")
        y = y.reshape(-1, n)
    m, n = y.shape
    if m < 3 or n < 2:
        raise ConfigError("the jackknife needs m >= 3 groups of size n >= 2")
    y = y - y.mean()
    S = y.sum(axis=1)
    Q = (y * y).sum(axis=1)
    between = S * S / n
    sse_i = Q - between                      # within-group sum of squares per group
    sse = sse_i.sum()
    T = S.sum()
    ssa = between.sum() - T * T / (m * n)
    full = _log_ratio(ssa, sse, m, n)

    sse_del = sse - sse_i
    ssa_del = (between.sum() - between) - (T - S) ** 2 / ((m - 1) * n)
    msa = ssa_del / (m - 2)
    mse = sse_del / ((m - 1) * (n - 1))
    if np.any(msa <= 0) or np.any(mse <= 0):
        raise DataError("a leave-one-group-out mean square is not positive")
    loo = np.log(msa / mse)
    pseudo = m * full - (m - 1) * loo
    jack = pseudo.mean()
    spread = np.sqrt(np.sum((pseudo - jack) ** 2) / (m - 1))
    target = np.log(1 + gamma0 * n)
    if spread == 0:
        raise NumericalError("jackknife pseudo-values have zero spread")
    t = np.sqrt(m) * (jack - target) / spread
    p = student_t_two_sided(t, m - 1)
    return TestResult(float(t), m - 1, p, _decide(p, levels), "jackknife-t")


def jackknife_subset_estimate(y2d, drop: int) -> float:
    """``log(MSA/MSE)`` recomputed from scratch without group ``drop``."""
    y = np.delete(np.asarray(y2d, dtype=float), drop, axis=0)
    m, n = y.shape
    gm = y.mean(axis=1, keepdims=True)
    sse = np.sum((y - gm) ** 2)
    ssa = n * np.sum((gm - y.mean()) ** 2)
    return float(_log_ratio(ssa, sse, m, n))
