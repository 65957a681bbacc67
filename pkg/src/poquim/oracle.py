"""Ground-truth computations used to check the main modules.

Everything here is written directly from the defining formulas with dense
linear algebra and shares no assembly code with :mod:`poquim.likelihood`,
:mod:`poquim.index_classes` or :mod:`poquim.information`.  The routines are
slow by design and meant for small models.

* exact quasi-information matrices given the true third and fourth moments,
  with the Gaussian part written in its column-sum form;
* Monte Carlo variance of the score with standard errors;
* closed-form moments of the simulation laws;
* brute-force classification of index tuples and class sums;
* the restricted likelihood through an explicit error contrast matrix.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class HigherMoments:
    """Per-term moments, index 0 being the error term."""

    kappa: np.ndarray
    third: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        for name in ("kappa", "third", "sigma2"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not (self.kappa.size == self.third.size == self.sigma2.size):
            raise ConfigError("moment vectors must have equal length")
        if np.any(self.kappa < -2 * self.sigma2 ** 2 - 1e-12):
            raise ConfigError("kurtosis below the feasibility bound -2 sigma^4")

    @classmethod
    def from_laws(cls, specs, sigma2):
        """Moments of the listed laws scaled to the given variances."""
        rows = [distribution_moments(sp, v) for sp, v in zip(specs, sigma2)]
        return cls([r[2] for r in rows], [r[1] for r in rows], [r[0] for r in rows])


# -- distributions ---------------------------------------------------------------

def _standard_moments(family, params):
    """Central (variance, third, fourth) moments of the unscaled law."""
    if family == "normal":
        return 1.0, 0.0, 3.0
    if family == "double-exponential":       # Laplace(0, 1): var 2, mu4 = 24
        return 2.0, 0.0, 24.0
    if family == "centered-exponential":     # Exp(1) - 1
        return 1.0, 2.0, 9.0
    if family == "normal-mixture":
        mu1, mu2, rho = params
        w = np.array([1 - rho, rho])
        mu = np.array([mu1, mu2])
        a = mu - w @ mu
        var = w @ (a ** 2 + 1)
        m3 = w @ (a ** 3 + 3 * a)
        m4 = w @ (a ** 4 + 6 * a ** 2 + 3)
        return float(var), float(m3), float(m4)
    raise ConfigError(f"unknown family {family!r}")


def distribution_moments(spec, target_variance=None):
    """``(sigma^2, E X^3, kappa)`` of a law centered and scaled to ``target_variance``.

    ``spec`` is a :class:`~poquim.simulation.DistributionSpec` or a
    ``(family, params)`` pair.
    """
    family = getattr(spec, "family", None) or spec[0]
    params = getattr(spec, "params", None)
    if params is None and not hasattr(spec, "family"):
        params = spec[1] if len(spec) > 1 else ()
    if target_variance is None:
        target_variance = spec.target_variance
    var, m3, m4 = _standard_moments(family, tuple(params or ()))
    if var <= 0:
        raise ConfigError("degenerate law with zero variance")
    v = float(target_variance)
    third = m3 / var ** 1.5 * v ** 1.5
    kappa = (m4 / var ** 2 - 3.0) * v ** 2
    return v, third, kappa


# -- dense building blocks ----------------------------------------------------------

def _designs(model):
    return [np.eye(model.N)] + [np.asarray(Z) for Z in model.Z]


def _cov(theta, model):
    lam, gamma = theta.lam, np.asarray(theta.gamma)
    V = np.eye(model.N)
    for g, Z in zip(gamma, model.Z):
        V = V + g * Z @ Z.T
    return lam * V


def _reml_B(theta, model):
    V = _cov(theta, model)
    Vi = np.linalg.inv(V)
    X = model.X
    P = Vi - Vi @ X @ np.linalg.inv(X.T @ Vi @ X) @ X.T @ Vi
    P = (P + P.T) / 2
    lam = theta.lam
    B = [P / (2 * lam)] + [lam / 2 * P @ Z @ Z.T @ P for Z in model.Z]
    b = [np.trace(Bj @ V) for Bj in B]
    return B, np.array(b), V


def _ml_C(theta, model):
    V = _cov(theta, model)
    Vi = np.linalg.inv(V)
    Vi = (Vi + Vi.T) / 2
    lam = theta.lam
    C = [Vi / (2 * lam)] + [lam / 2 * Vi @ Z @ Z.T @ Vi for Z in model.Z]
    c = [np.trace(Cj @ V) for Cj in C]
    return C, np.array(c), V, Vi


def _sigma2(theta):
    return theta.lam * np.concatenate([[1.0], np.asarray(theta.gamma)])


def gaussian_information(mats, theta, model):
    """``2 tr(A_j V A_k V)`` from the column-sum form
    ``sum_{t1,t2} sigma_t1^2 sigma_t2^2 <Z_t1' A_j Z_t2, Z_t1' A_k Z_t2>``."""
    Zs = _designs(model)
    s2 = _sigma2(theta)
    J = len(mats)
    G = np.zeros((J, J))
    for t1, t2 in itertools.product(range(len(Zs)), repeat=2):
        blocks = [Zs[t1].T @ A @ Zs[t2] for A in mats]
        for j in range(J):
            for k in range(J):
                G[j, k] += s2[t1] * s2[t2] * np.sum(blocks[j] * blocks[k])
    return 2 * G


def trace_information(mats, V):
    """``2 tr(A_j V A_k V)`` by direct matrix products."""
    AV = [A @ V for A in mats]
    return 2 * np.array([[np.trace(a @ b) for b in AV] for a in AV])


def _kurtosis_part(mats, moments, model):
    Zs = _designs(model)
    J = len(mats)
    out = np.zeros((J, J))
    for t, Z in enumerate(Zs):
        if moments.kappa[t] == 0:
            continue
        d = np.array([np.einsum("il,ij,jl->l", Z, A, Z) for A in mats])   # (J, m_t)
        out += moments.kappa[t] * d @ d.T
    return out


def analytic_quim_reml(theta, moments: HigherMoments, model) -> np.ndarray:
    """Exact ``Var(dl_R/dtheta)`` under the given third/fourth moments."""
    B, _, _ = _reml_B(theta, model)
    return gaussian_information(B, theta, model) + _kurtosis_part(B, moments, model)


def analytic_quim_ml(theta, beta, moments: HigherMoments, model) -> np.ndarray:
    """Exact ``Var(dl/dpsi)`` for ``psi = (beta, lambda, gamma)``."""
    C, _, _, Vi = _ml_C(theta, model)
    X = model.X
    p = X.shape[1]
    Zs = _designs(model)
    th = gaussian_information(C, theta, model) + _kurtosis_part(C, moments, model)
    bt = np.zeros((p, len(C)))
    for t, Z in enumerate(Zs):
        if moments.third[t] == 0:
            continue
        xz = X.T @ Vi @ Z                                          # (p, m_t)
        d = np.array([np.einsum("il,ij,jl->l", Z, Ck, Z) for Ck in C])
        bt += moments.third[t] * xz @ d.T
    d = p + len(C)
    out = np.zeros((d, d))
    out[:p, :p] = X.T @ Vi @ X
    out[:p, p:] = bt
    out[p:, :p] = bt.T
    out[p:, p:] = th
    return out


def analytic_acm_reml(theta, moments, model):
    """``(Sigma_R, G)`` with ``Sigma_R = G^{-1} I_1 G^{-1}`` and G the Gaussian information."""
    B, _, V = _reml_B(theta, model)
    G = trace_information(B, V)
    Gi = np.linalg.inv(G)
    I1 = analytic_quim_reml(theta, moments, model)
    S = Gi @ I1 @ Gi
    return (S + S.T) / 2, G


# -- Monte Carlo -----------------------------------------------------------------

def simulate_responses(theta, beta, model, laws, reps, seed):
    """Draw ``reps`` responses; ``laws`` lists one (family, params) per term, error first."""
    from .simulation import sample_law  # sampling only, no assembly code

    rng = np.random.default_rng(seed)
    s2 = _sigma2(theta)
    Zs = _designs(model)
    Y = np.tile(model.X @ np.asarray(beta, dtype=float), (reps, 1))
    for t, (Z, law) in enumerate(zip(Zs, laws)):
        if s2[t] == 0:
            continue
        a = sample_law(rng, law, s2[t], (reps, Z.shape[1]))
        Y += a @ Z.T
    return Y


def _cov_with_se(S):
    R = S.shape[0]
    D = S - S.mean(axis=0)
    prods = D[:, :, None] * D[:, None, :]
    cov = prods.sum(axis=0) / (R - 1)
    se = prods.std(axis=0, ddof=1) / np.sqrt(R)
    return cov, se


def mc_score_variance(theta, beta, model, generator, reps=10000, seed=0, kind="reml"):
    """Sample covariance of the score over simulated datasets, with per-entry SEs.

    ``generator`` lists one law per term (error first) as accepted by
    :func:`poquim.simulation.sample_law`.
    """
    if reps < 1000:
        raise ConfigError("mc_score_variance needs at least 1000 replicates")
    Y = simulate_responses(theta, beta, model, generator, reps, seed)
    if kind == "reml":
        B, b, _ = _reml_B(theta, model)
        S = np.stack([np.einsum("ri,ij,rj->r", Y, Bj, Y) - bj for Bj, bj in zip(B, b)], axis=1)
    elif kind == "ml":
        C, c, _, Vi = _ml_C(theta, model)
        U = Y - model.X @ np.asarray(beta, dtype=float)
        sb = U @ Vi @ model.X
        st = np.stack([np.einsum("ri,ij,rj->r", U, Cj, U) - cj for Cj, cj in zip(C, c)], axis=1)
        S = np.hstack([sb, st])
    else:
        raise ConfigError(f"unknown kind {kind!r}")
    return _cov_with_se(S)


def mc_mean_with_se(samples):
    """Mean and standard error along the first axis."""
    samples = np.asarray(samples, dtype=float)
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])


# -- brute force index classes ----------------------------------------------------

def brute_force_keys(model, order):
    """Coefficient key of every ordered tuple, shape (N,)*order + (s+1,)."""
    Zs = _designs(model)
    letters = "abcd"[:order]
    spec = ",".join(f"{c}l" for c in letters) + "->" + letters
    return np.stack([np.einsum(spec, *([Z] * order)) for Z in Zs], axis=-1)


def _group_keys(keys, precision=1e-9):
    flat = keys.reshape(-1, keys.shape[-1])
    scale = np.max(np.abs(flat), axis=0)
    scale[scale == 0] = 1
    q = np.round(flat / scale / precision).astype(np.int64)
    nz = np.any(q != 0, axis=1)
    groups = {}
    for idx in np.flatnonzero(nz):
        groups.setdefault(tuple(q[idx]), []).append(idx)
    out = []
    for k in sorted(groups):
        idx = np.array(groups[k])
        out.append((tuple(flat[idx[0]]), idx))
    return out


def brute_force_partition(model, order):
    """List of ``(key, ordered count)`` sorted like the main engine."""
    return [(k, idx.size) for k, idx in _group_keys(brute_force_keys(model, order))]


def brute_force_class_means(model, A, Bm):
    """Class means of ``A[i1,i2] B[i3,i4]`` over ordered quadruples."""
    prod = np.einsum("ab,cd->abcd", A, Bm).reshape(-1)
    return [float(prod[idx].mean()) for _, idx in _group_keys(brute_force_keys(model, 4))]


def brute_force_triple_means(model, q, C):
    """Class means of ``q[i1] C[i2,i3]`` over ordered triples."""
    prod = np.einsum("a,bc->abc", q, C).reshape(-1)
    return [float(prod[idx].mean()) for _, idx in _group_keys(brute_force_keys(model, 3))]


# -- explicit contrasts ---------------------------------------------------------------

def reml_loglik_explicit_t(theta, model):
    """``-1/2 {log|T'VT| + y'T(T'VT)^{-1}T'y}`` with T an orthonormal basis of
    the null space of X'.  Differs from the main routine by ``-1/2 log|X'X|``."""
    T = linalg.null_space(model.X.T)
    V = _cov(theta, model)
    A = T.T @ V @ T
    w = T.T @ model.y
    sign, logdet = np.linalg.slogdet(A)
    return -0.5 * (logdet + w @ np.linalg.solve(A, w))
