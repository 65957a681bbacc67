"""POQUIM assembly for REML and ML, and the sandwich ACM.

The quasi-information splits into an observed part, in which fourth (or
third) order residual products are summed over each index class and weighted
by the class mean of the score-matrix products, and an estimated part that
depends on theta only.  All N x N matrices involved are identity-plus-low-rank,
so they are carried in factored form and only the entries or cell sums the
class engine asks for are evaluated.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ._covariance import CovarianceState, SufficientStats
from .errors import NumericalError
from .index_classes import classify_quadruples, classify_triples
from .model import FixedEffects, ModelSpec, VarianceComponents, _check_theta, residuals

EIG_TOL = 1e-10


class FactoredOperand:
    """Symmetric ``d I + sum_k c_k W_k U_k'`` with ``W_k = U_k G_k`` for symmetric G_k."""

    def __init__(self, diag: float = 0.0, terms=()):
        self.diag = float(diag)
        self.terms = [(np.ascontiguousarray(U), np.ascontiguousarray(W), float(c))
                      for U, W, c in terms]
        self.rank = sum(U.shape[1] for U, _, _ in self.terms)

    def entries(self, i, j):
        out = np.where(i == j, self.diag, 0.0)
        for U, W, c in self.terms:
            out = out + c * np.einsum("ij,ij->i", W[i], U[j])
        return out

    def cell_sums(self, E):
        out = self.diag * np.asarray(E.sum(axis=1)).reshape(-1)
        for U, W, c in self.terms:
            out = out + c * np.einsum("ij,ij->i", np.asarray(E @ W), np.asarray(E @ U))
        return out

    def dense(self, N):
        A = self.diag * np.eye(N)
        for U, W, c in self.terms:
            A += c * (W @ U.T)
        return A


@dataclass(frozen=True, eq=False)
class QuimDecomposition:
    """Observed and estimated parts of the POQUIM, their sum, and I_2."""

    observed: np.ndarray
    estimated: np.ndarray
    total: np.ndarray
    i2: np.ndarray
    dimension: int
    source: str = "reml"


@dataclass(frozen=True, eq=False)
class AcmEstimate:
    sigma: np.ndarray
    source: str


def _sym(A):
    return 0.5 * (A + A.T)


def _setup(theta, beta, model):
    _check_theta(theta, model)
    st = CovarianceState(SufficientStats(model), theta.lam, theta.gamma)
    u = residuals(beta, model)
    return st, u


def _gamma_operand(st):
    S = st.structure
    gcol = st.gamma[S.term]
    return FactoredOperand(1.0, [(S.Z, S.Z * gcol, 1.0)] if S.q else [])


def _column_ops(M, lam, structure):
    """Operands ``(1/2 lam) M_j M_j'`` for the column blocks of M = lam A Z."""
    ops = []
    for t in range(structure.s):
        cols = slice(structure.offsets[t], structure.offsets[t + 1])
        Mj = M[:, cols]
        ops.append(FactoredOperand(0.0, [(Mj, Mj, 1.0 / (2 * lam))]))
    return ops


def _fourth_order_parts(partition, ops, u, gam_op, lam, info2):
    """Observed and estimated parts from class sums of the given operands."""
    J = len(ops)
    S = partition.pair_sums(ops + [gam_op])
    h = partition.cardinalities.astype(float)
    coef = S[:, :J, :J] / h[:, None, None]
    gg = S[:, J, J]
    pw = partition.power_sums(u)
    observed = np.tensordot(pw, coef, axes=(0, 0))
    estimated = info2 - 3 * lam ** 2 * np.tensordot(gg, coef, axes=(0, 0))
    return _sym(observed), _sym(estimated)


def reml_operands(st: CovarianceState):
    """Factored ``B_0, ..., B_s``."""
    S = st.structure
    lam = st.lam
    c = -1.0 / (2 * lam ** 2)
    terms = []
    if S.q:
        terms.append((S.Z, S.Z @ st.kdense(), c))
    if S.p:
        Xt = st.xtilde()
        terms.append((Xt, linalg.cho_solve(st.at_chol, Xt.T).T, c))
    ops = [FactoredOperand(1.0 / (2 * lam ** 2), terms)]
    if S.q:
        ops += _column_ops(st.pz_t(), lam, S)
    return ops


def ml_operands(st: CovarianceState):
    """Factored ``C_0, ..., C_s`` and the vectors ``q_j = V^{-1}X_j``."""
    S = st.structure
    lam = st.lam
    terms = [(S.Z, S.Z @ st.kdense(), -1.0 / (2 * lam ** 2))] if S.q else []
    ops = [FactoredOperand(1.0 / (2 * lam ** 2), terms)]
    if S.q:
        ops += _column_ops(st.vinv_z_t(), lam, S)
    return ops, st.xtilde() / lam


def poquim_reml(theta_hat: VarianceComponents, beta_hat, model: ModelSpec,
                partition=None) -> QuimDecomposition:
    """POQUIM of the REML score at ``theta_hat`` with residuals ``y - X beta_hat``."""
    st, u = _setup(theta_hat, beta_hat, model)
    part = partition or classify_quadruples(model)
    i2 = st.reml_hessian()
    observed, estimated = _fourth_order_parts(part, reml_operands(st), u,
                                              _gamma_operand(st), st.lam, -i2)
    return QuimDecomposition(observed, estimated, observed + estimated, i2,
                             model.s + 1, "reml")


def poquim_ml(theta_hat: VarianceComponents, beta_hat, model: ModelSpec,
              partition3=None, partition4=None) -> QuimDecomposition:
    """POQUIM of the ML score, ordered ``(beta, lambda, gamma)``.

    The beta block is X'V^{-1}X (estimated only), the beta-theta block is
    observed only through third-order residual products, and the theta block
    splits as in the REML case with the ``C`` matrices.
    """
    st, u = _setup(theta_hat, beta_hat, model)
    p, s = model.p, model.s
    p3 = partition3 or classify_triples(model)
    p4 = partition4 or classify_quadruples(model)
    ops, qv = ml_operands(st)
    i2 = st.ml_hessian()
    obs_tt, est_tt = _fourth_order_parts(p4, ops, u, _gamma_operand(st), st.lam,
                                         -i2[p:, p:])
    T = p3.triple_sums(qv, ops) / p3.cardinalities[:, None, None].astype(float)
    obs_bt = np.tensordot(p3.power_sums(u), T, axes=(0, 0))      # (p, s+1)
    d = p + s + 1
    observed = np.zeros((d, d))
    estimated = np.zeros((d, d))
    observed[:p, p:] = obs_bt
    observed[p:, :p] = obs_bt.T
    observed[p:, p:] = obs_tt
    estimated[:p, :p] = st.at / st.lam
    estimated[p:, p:] = est_tt
    return QuimDecomposition(observed, estimated, observed + estimated, i2, d, "ml")


def acm(decomp: QuimDecomposition, check_psd: bool = True) -> AcmEstimate:
    """Sandwich ``I_2^{-1} I_1 I_2^{-1}``.

    Raises :class:`NumericalError` when I_2 is singular or, with
    ``check_psd``, when the result has an eigenvalue below ``-EIG_TOL`` times
    its spectral radius.  The POQUIM is not PSD by construction (its observed
    part is a signed combination of residual moments), so callers that only
    need a quadratic form in a few directions may skip the check.
    """
    i2 = decomp.i2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            lu = linalg.lu_factor(i2, check_finite=True)
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * np.max(np.abs(np.diag(lu[0]))):
            raise NumericalError("I_2 is singular")
        left = linalg.lu_solve(lu, decomp.total)
        sigma = linalg.lu_solve(lu, left.T).T
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("I_2 is singular") from exc
    sigma = _sym(sigma)
    if not check_psd:
        return AcmEstimate(sigma, decomp.source)
    ev = np.linalg.eigvalsh(sigma)
    if ev[0] < -EIG_TOL * max(abs(ev[-1]), np.finfo(float).tiny):
        raise NumericalError(f"ACM estimate is not positive semidefinite (min eigenvalue {ev[0]:.3g})")
    return AcmEstimate(sigma, decomp.source)
