"""Mixed linear model containers and dense reference computations.

The model is ``y = X beta + Z_1 alpha_1 + ... + Z_s alpha_s + eps`` with
variance components in Hartley-Rao form, ``lambda = sigma_0^2`` and
``gamma_t = sigma_t^2 / sigma_0^2``.  The error design ``Z_0 = I_N`` is
implicit and never stored.

The functions here build V, P and the GLS estimate with dense
factorizations.  They are the contract-level reference; the fitting code
in :mod:`poquim.likelihood` works through the low-dimensional identities in
:mod:`poquim._covariance` instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericalError, RankDeficientError


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    """Hartley-Rao parameters ``theta = (lambda, gamma_1, ..., gamma_s)``."""

    lam: float
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float)).copy()
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "lam", float(self.lam))
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not np.all(np.isfinite(gamma)) or np.any(gamma < 0):
            raise ConfigError(f"gamma must be finite and >= 0, got {gamma}")

    @classmethod
    def from_vector(cls, theta) -> "VarianceComponents":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0], theta[1:])

    @property
    def s(self) -> int:
        return self.gamma.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.lam], self.gamma])

    def sigma2(self) -> np.ndarray:
        """Variances ``(sigma_0^2, ..., sigma_s^2)``."""
        return self.lam * np.concatenate([[1.0], self.gamma])

    def __repr__(self):
        return f"VarianceComponents(lam={self.lam!r}, gamma={self.gamma.tolist()!r})"


@dataclass(frozen=True, eq=False)
class FixedEffects:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        if not np.all(np.isfinite(beta)):
            raise NumericalError("fixed effects must be finite")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Response, fixed design and random-effect designs of a mixed model.

    Parameters
    ----------
    y : (N,) array
    X : (N, p) array of full column rank
    Z : sequence of (N, m_t) arrays, one per random term
    x_names, z_names : labels for the fixed covariates and random terms
    weighted : per-term flags; a weighted (slope-type) term may have rows
        that are entirely zero, a grouping term may not.
    """

    y: np.ndarray
    X: np.ndarray
    Z: tuple
    x_names: tuple = ()
    z_names: tuple = ()
    weighted: tuple = ()
    _cache: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        N, p = X.shape
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if y.shape[0] != N:
            raise ConfigError(f"y has length {y.shape[0]} but X has {N} rows")
        Z = []
        for t, Zt in enumerate(self.Z, start=1):
            Zt = np.asarray(Zt, dtype=float)
            if Zt.ndim == 1:
                Zt = Zt[:, None]
            if Zt.shape[0] != N:
                raise ConfigError(f"Z_{t} has {Zt.shape[0]} rows, expected N={N}")
            Z.append(Zt)
        s = len(Z)
        weighted = tuple(bool(w) for w in self.weighted) or (False,) * s
        if len(weighted) != s:
            raise ConfigError("weighted flags must have one entry per random term")
        x_names = tuple(self.x_names) or tuple(f"x{j}" for j in range(p))
        z_names = tuple(self.z_names) or tuple(f"z{t}" for t in range(1, s + 1))
        if len(x_names) != p or len(z_names) != s:
            raise ConfigError("label counts do not match the designs")

        cache = self._cache
        if cache is None:
            # design checks run once per design, not per response vector
            for name, A in [("y", y), ("X", X)] + [(f"Z_{t}", Zt) for t, Zt in enumerate(Z, 1)]:
                if not np.all(np.isfinite(A)):
                    raise ConfigError(f"{name} contains non-finite entries")
            if p > N:
                raise RankDeficientError(f"p={p} exceeds N={N}")
            if p and np.linalg.matrix_rank(X) < p:
                raise RankDeficientError("X does not have full column rank")
            for t, (Zt, w) in enumerate(zip(Z, weighted), start=1):
                if not w and np.any(~np.any(Zt != 0, axis=1)):
                    raise ConfigError(
                        f"Z_{t} has all-zero rows; declare the term weighted if intended")
            cache = {}
        elif not np.all(np.isfinite(y)):
            raise ConfigError("y contains non-finite entries")

        for A in [y, X, *Z]:
            A.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", tuple(Z))
        object.__setattr__(self, "weighted", weighted)
        object.__setattr__(self, "x_names", x_names)
        object.__setattr__(self, "z_names", z_names)
        object.__setattr__(self, "_cache", cache)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def s(self) -> int:
        return len(self.Z)

    @property
    def m(self) -> tuple:
        return tuple(Zt.shape[1] for Zt in self.Z)

    def with_response(self, y) -> "ModelSpec":
        """Same design, new response; design-derived caches are shared."""
        return ModelSpec(y, self.X, self.Z, self.x_names, self.z_names,
                         self.weighted, _cache=self._cache)

    def permuted_terms(self, order: Sequence[int]) -> "ModelSpec":
        order = list(order)
        return ModelSpec(self.y, self.X, [self.Z[i] for i in order], self.x_names,
                         [self.z_names[i] for i in order],
                         [self.weighted[i] for i in order])


def _check_theta(theta: VarianceComponents, model: ModelSpec):
    if theta.s != model.s:
        raise ConfigError(f"theta has {theta.s} ratios but the model has {model.s} random terms")


def build_covariance(theta: VarianceComponents, model: ModelSpec) -> np.ndarray:
    """``V = lambda (I + sum_t gamma_t Z_t Z_t')``."""
    _check_theta(theta, model)
    V = np.eye(model.N)
    for g, Zt in zip(theta.gamma, model.Z):
        V += g * (Zt @ Zt.T)
    return theta.lam * V


def _chol(A, what):
    try:
        return linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def _xvx(theta, model):
    V = build_covariance(theta, model)
    cV = _chol(V, "V")
    VinvX = linalg.cho_solve(cV, model.X)
    A = model.X.T @ VinvX
    A = 0.5 * (A + A.T)
    if model.p and np.linalg.cond(A) > 1e13:
        raise RankDeficientError("X'V^{-1}X is numerically singular")
    return cV, VinvX, A


def build_projection(theta: VarianceComponents, model: ModelSpec) -> np.ndarray:
    """``P = V^{-1} - V^{-1} X (X'V^{-1}X)^{-1} X'V^{-1}``."""
    cV, VinvX, A = _xvx(theta, model)
    Vinv = linalg.cho_solve(cV, np.eye(model.N))
    if model.p:
        Vinv -= VinvX @ np.linalg.solve(A, VinvX.T)
    return 0.5 * (Vinv + Vinv.T)


def gls_beta(theta: VarianceComponents, model: ModelSpec) -> FixedEffects:
    """``beta_hat = (X'V^{-1}X)^{-1} X'V^{-1} y``."""
    _, VinvX, A = _xvx(theta, model)
    return FixedEffects(np.linalg.solve(A, VinvX.T @ model.y))


def residuals(beta: FixedEffects, model: ModelSpec) -> np.ndarray:
    b = beta.beta if isinstance(beta, FixedEffects) else np.asarray(beta, dtype=float)
    if b.shape[0] != model.p:
        raise ConfigError(f"beta has length {b.shape[0]}, expected p={model.p}")
    return model.y - model.X @ b


# -- common designs --------------------------------------------------------

def indicator(labels) -> np.ndarray:
    """0/1 indicator matrix of a factor, levels ordered by first appearance."""
    labels = list(labels)
    levels = {}
    for lab in labels:
        levels.setdefault(lab, len(levels))
    Z = np.zeros((len(labels), len(levels)))
    Z[np.arange(len(labels)), [levels[lab] for lab in labels]] = 1.0
    return Z


def one_way(sizes, y=None, X=None) -> ModelSpec:
    """Nested (one-way) layout ``y_ij = x_ij' beta + alpha_i + eps_ij``.

    ``sizes`` is a list of group sizes; observations are ordered group by group.
    Without ``X`` an intercept-only design is used.
    """
    sizes = [int(n) for n in sizes]
    groups = np.repeat(np.arange(len(sizes)), sizes)
    N = groups.size
    if X is None:
        X = np.ones((N, 1))
        x_names = ("intercept",)
    else:
        X = np.asarray(X, dtype=float)
        x_names = ()
    y = np.zeros(N) if y is None else y
    return ModelSpec(y, X, [indicator(groups)], x_names=x_names, z_names=("group",))


def balanced_one_way(m: int, n: int, y=None) -> ModelSpec:
    return one_way([n] * m, y=y)


def two_way_crossed(m: int, n: int, y=None) -> ModelSpec:
    """Crossed layout ``y_ij = mu + v_i + w_j + e_ij``, ordered ``y_11, ..., y_1n, y_21, ...``."""
    rows = np.repeat(np.arange(m), n)
    cols = np.tile(np.arange(n), m)
    y = np.zeros(m * n) if y is None else y
    return ModelSpec(y, np.ones((m * n, 1)), [indicator(rows), indicator(cols)],
                     x_names=("intercept",), z_names=("row", "col"))


def intercept_slope(times, y=None) -> ModelSpec:
    """Before/after design with a random intercept and a random slope per subject.

    ``y_i = b0 + a_i + e_i`` and ``y_{m+i} = b0 + b1 t_i + a_i + b_i t_i + e_{m+i}``.
    """
    t = np.asarray(times, dtype=float)
    m = t.size
    N = 2 * m
    X = np.column_stack([np.ones(N), np.concatenate([np.zeros(m), t])])
    Za = np.vstack([np.eye(m), np.eye(m)])
    Zb = np.vstack([np.zeros((m, m)), np.diag(t)])
    y = np.zeros(N) if y is None else y
    return ModelSpec(y, X, [Za, Zb], x_names=("intercept", "time"),
                     z_names=("intercept", "slope"), weighted=(False, True))
