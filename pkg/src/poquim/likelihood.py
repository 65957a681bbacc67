"""Gaussian restricted and full log-likelihoods, their scores and expected
Hessians, and the fitting routines built on them.

Both likelihoods are used as quasi-likelihoods: nothing here assumes the
data are normal, the Gaussian forms only define the estimating equations.
The additive constant is taken to be zero, so only differences of
log-likelihood values carry meaning.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._covariance import CovarianceState, SufficientStats
from .errors import ConfigError, NumericalError
from .model import (FixedEffects, ModelSpec, VarianceComponents, _check_theta,
                    build_covariance, build_projection)

BOUNDARY_GAMMA = 1e-8


def _state(theta: VarianceComponents, model: ModelSpec) -> CovarianceState:
    _check_theta(theta, model)
    return CovarianceState(SufficientStats(model), theta.lam, theta.gamma)


def _beta_vec(beta, model):
    b = beta.beta if isinstance(beta, FixedEffects) else np.asarray(beta, dtype=float)
    if b.shape != (model.p,):
        raise ConfigError(f"beta has shape {b.shape}, expected ({model.p},)")
    return b


# -- score decompositions ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RemlScoreParts:
    """Quadratic-form pieces of the REML score, ``dl_R/dtheta_j = y'B_j y - b_j``."""

    B: list
    b: np.ndarray


@dataclass(frozen=True, eq=False)
class MlScoreParts:
    """Pieces of the ML score: ``u'C_j u - c_j`` for theta and ``q_j'u`` for beta."""

    C: list
    c: np.ndarray
    q: np.ndarray      # (N, p), columns q_j = V^{-1} X_j


def reml_score_parts(theta: VarianceComponents, model: ModelSpec) -> RemlScoreParts:
    P = build_projection(theta, model)
    lam = theta.lam
    B = [P / (2 * lam)]
    b = [(model.N - model.p) / (2 * lam)]
    for Zj in model.Z:
        PZ = P @ Zj
        B.append(0.5 * lam * (PZ @ PZ.T))
        b.append(0.5 * lam * np.sum(Zj * PZ))
    return RemlScoreParts(B, np.array(b))


def ml_score_parts(theta: VarianceComponents, model: ModelSpec) -> MlScoreParts:
    V = build_covariance(theta, model)
    Vinv = np.linalg.inv(V)
    Vinv = 0.5 * (Vinv + Vinv.T)
    lam = theta.lam
    C = [Vinv / (2 * lam)]
    c = [model.N / (2 * lam)]
    for Zj in model.Z:
        VZ = Vinv @ Zj
        C.append(0.5 * lam * (VZ @ VZ.T))
        c.append(0.5 * lam * np.sum(Zj * VZ))
    return MlScoreParts(C, np.array(c), Vinv @ model.X)


# -- REML ----------------------------------------------------------------------

def reml_loglik(theta: VarianceComponents, model: ModelSpec) -> float:
    """``-1/2 {log|V| + log|X'V^{-1}X| + y'Py}``."""
    return _state(theta, model).reml_loglik()


def reml_score(theta: VarianceComponents, model: ModelSpec) -> np.ndarray:
    return _state(theta, model).reml_score()


def reml_expected_hessian(theta: VarianceComponents, model: ModelSpec) -> np.ndarray:
    return _state(theta, model).reml_hessian()


# -- ML ------------------------------------------------------------------------

def ml_loglik(beta, theta: VarianceComponents, model: ModelSpec) -> float:
    """``-1/2 {log|V| + (y - X beta)'V^{-1}(y - X beta)}``."""
    return _state(theta, model).ml_loglik(_beta_vec(beta, model))


def ml_score(beta, theta: VarianceComponents, model: ModelSpec) -> np.ndarray:
    """Score ordered as ``(beta_1..beta_p, lambda, gamma_1..gamma_s)``."""
    return _state(theta, model).ml_score(_beta_vec(beta, model))


def ml_expected_hessian(beta, theta: VarianceComponents, model: ModelSpec) -> np.ndarray:
    _beta_vec(beta, model)
    return _state(theta, model).ml_hessian()


# -- fitting -------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings.

    ``starts`` lists the starting points tried; each entry is ``"moment"`` for
    a method-of-moments start or a number used for every gamma.  The best
    converged run (highest log-likelihood) is reported.
    """

    tol: float = 1e-8
    max_iter: int = 200
    starts: tuple = ("moment", 0.5, 2.0)
    max_step: float = 3.0


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: VarianceComponents
    beta_hat: FixedEffects
    loglik: float
    converged: bool
    boundary: tuple
    iterations: int
    method: str = "reml"
    gradient: np.ndarray = field(default=None, repr=False)


class _Objective:
    """Profiled objective over theta for either likelihood."""

    def __init__(self, model: ModelSpec, method: str):
        if method not in ("reml", "ml"):
            raise ConfigError(f"unknown method {method!r}")
        self.model = model
        self.method = method
        self.stats = SufficientStats(model)
        self.s = model.s

    def state(self, theta):
        return CovarianceState(self.stats, theta[0], theta[1:])

    def value(self, st):
        return st.reml_loglik() if self.method == "reml" else st.ml_loglik()

    def score(self, st):
        if self.method == "reml":
            return st.reml_score()
        return st.ml_score()[self.model.p:]

    def hessian(self, st):
        return st.reml_hessian() if self.method == "reml" else st.ml_theta_hessian()


def _moment_start(obj: _Objective) -> np.ndarray:
    """Method-of-moments start from OLS residuals.

    At ``lambda = 1, gamma = 0`` the state holds ``Z'MZ`` and ``Z'My`` for the
    OLS residual maker M; matching ``E||Z_t'My||^2`` and ``E y'My`` to their
    observed values gives a linear system whose matrix is minus twice the
    expected Hessian at that point.
    """
    st = obj.state(np.concatenate([[1.0], np.zeros(obj.s)]))
    N, p = st._N, st._p
    A = -2.0 * st._hessian(N - p, st.zpz_t)
    rhs = np.concatenate([[st.ypy_t],
                          np.bincount(st.structure.term, weights=st.rho ** 2,
                                      minlength=obj.s)])
    try:
        sig = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        sig = np.linalg.lstsq(A, rhs, rcond=None)[0]
    lam = max(sig[0], 1e-3 * st.ypy_t / max(N - p, 1))
    gamma = np.clip(sig[1:] / lam, 1e-2, 1e2)
    return np.concatenate([[lam], gamma])


def _profile_lambda(obj, gamma):
    """Closed-form lambda at fixed gamma."""
    st = obj.state(np.concatenate([[1.0], gamma]))
    dof = st._N - (st._p if obj.method == "reml" else 0)
    return max(st.ypy_t / dof, 1e-300)


def _optimize(obj: _Objective, start: np.ndarray, free: np.ndarray, opts: FitOptions):
    """Fisher scoring in log coordinates over the free components of theta.

    Returns (theta, state, converged, boundary mask, iterations).
    """
    theta = start.copy()
    free = free.copy()
    boundary = np.zeros(theta.size, dtype=bool)
    st = obj.state(theta)
    f = obj.value(st)
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        g = obj.score(st)
        # gamma components parked at the floor: pin to 0 when the score points outward
        low = free & (np.arange(theta.size) > 0) & (theta <= BOUNDARY_GAMMA)
        if low.any():
            trial = theta.copy()
            trial[low] = 0.0
            st0 = obj.state(trial)
            g0 = obj.score(st0)
            outward = low & (g0 <= 0)
            if outward.any():
                theta[outward] = 0.0
                free &= ~outward
                boundary |= outward
                st = obj.state(theta)
                f = obj.value(st)
                g = obj.score(st)
        idx = np.flatnonzero(free)
        if idx.size == 0:
            converged = True
            break
        th = theta[idx]
        glog = th * g[idx]
        if np.max(np.abs(glog)) <= opts.tol:
            converged = True
            break
        H = obj.hessian(st)[np.ix_(idx, idx)] * np.outer(th, th)
        try:
            step = np.linalg.solve(-H, glog)
        except np.linalg.LinAlgError:
            step = glog / max(np.abs(np.diag(H)).max(), 1.0)
        big = np.max(np.abs(step))
        if big > opts.max_step:
            step *= opts.max_step / big
        t = 1.0
        while True:
            trial = theta.copy()
            trial[idx] = np.maximum(th * np.exp(t * step), 0.0)
            gam = trial[1:]
            gam[(gam < BOUNDARY_GAMMA) & free[1:]] = BOUNDARY_GAMMA
            try:
                st_new = obj.state(trial)
                f_new = obj.value(st_new)
            except NumericalError:
                f_new = -np.inf
            if f_new >= f - 1e-12 * max(1.0, abs(f)) or t < 1e-10:
                break
            t *= 0.5
        if not np.isfinite(f_new):
            break
        theta, st, f = trial, st_new, f_new
    return theta, st, converged, boundary, it


def _fit(model: ModelSpec, method: str, fixed: Mapping[int, float] | None,
         options: FitOptions | None) -> FitResult:
    opts = options or FitOptions()
    obj = _Objective(model, method)
    s = model.s
    fixed = dict(fixed or {})
    for k, v in fixed.items():
        if not 0 <= k <= s:
            raise ConfigError(f"fixed component index {k} outside 0..{s}")
        if (k == 0 and not v > 0) or v < 0:
            raise ConfigError(f"invalid pinned value {v} for component {k}")
    free = np.ones(s + 1, dtype=bool)
    free[list(fixed)] = False

    starts = []
    for spec in opts.starts:
        if spec == "moment":
            starts.append(_moment_start(obj))
        else:
            g = float(spec)
            starts.append(np.concatenate([[1.0], np.full(s, g)]))
    best = None
    for th0 in starts:
        th0 = th0.copy()
        for k, v in fixed.items():
            th0[k] = v
        if free[0]:
            th0[0] = _profile_lambda(obj, th0[1:])
        res = _optimize(obj, th0, free, opts)
        val = obj.value(res[1])
        key = (res[2], val)
        if best is None or key > best[0]:
            best = (key, res)
        if s == 0 or not free[1:].any():
            break
    (_, f), (theta, st, converged, boundary, it) = best
    g = obj.score(st)
    bnd = tuple(bool(b) for b in boundary[1:])
    return FitResult(VarianceComponents(theta[0], theta[1:]), FixedEffects(st.beta), f,
                     converged, bnd, it, method, g)


def fit_reml(model: ModelSpec, options: FitOptions | None = None) -> FitResult:
    """Maximize the restricted log-likelihood over lambda > 0, gamma >= 0."""
    return _fit(model, "reml", None, options)


def fit_ml(model: ModelSpec, options: FitOptions | None = None) -> FitResult:
    """Maximize the log-likelihood, beta profiled out by GLS at each theta."""
    return _fit(model, "ml", None, options)


def fit_reml_constrained(model: ModelSpec, fixed_components: Mapping[int, float],
                         options: FitOptions | None = None) -> FitResult:
    """REML over the free coordinates of theta; keys of ``fixed_components``
    index theta as ``0 -> lambda``, ``t -> gamma_t``."""
    return _fit(model, "reml", fixed_components, options)
