"""Likelihood building blocks evaluated in random-effect space.

With ``Z = [Z_1 ... Z_s]`` (N x q), ``D = diag(sqrt(gamma))`` expanded over the
columns of Z and ``M = I_q + D Z'Z D``, the Woodbury identity gives

    V^{-1} = lambda^{-1} (I_N - Z K Z'),   K = D M^{-1} D,
    log|V| = N log(lambda) + log|M|.

``M`` is block diagonal over the connected components of the random-effect
columns (two columns are connected when some observation loads on both), so
it is factored block by block, batching blocks of equal size.  Everything a
likelihood evaluation needs then follows from the cross products ``Z'Z``,
``Z'X``, ``X'X``, ``Z'y``, ``X'y`` and ``y'y``; nothing of size N x N is formed.

Quantities carrying a trailing ``_t`` are scaled by lambda, e.g.
``zvz_t = lambda Z'V^{-1}Z``.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.csgraph import connected_components

from .errors import NumericalError, RankDeficientError


class DesignStructure:
    """Response-free quantities of a design, computed once and cached."""

    def __init__(self, X, Z):
        self.X = X
        self.N, self.p = X.shape
        self.s = len(Z)
        self.m = np.array([Zt.shape[1] for Zt in Z], dtype=int)
        self.q = int(self.m.sum())
        self.Z = np.hstack(Z) if Z else np.zeros((self.N, 0))
        self.Zsp = sparse.csr_matrix(self.Z)
        self.term = np.repeat(np.arange(self.s), self.m)
        self.offsets = np.concatenate([[0], np.cumsum(self.m)])
        # term membership of the columns of Z, used for per-term traces / norms
        self.E = np.zeros((self.q, self.s))
        self.E[np.arange(self.q), self.term] = 1.0
        self.ZtZ = np.asarray((self.Zsp.T @ self.Zsp).todense())
        self.ZtX = np.asarray(self.Zsp.T @ X)
        self.XtX = X.T @ X

        if self.q:
            graph = sparse.csr_matrix(self.ZtZ != 0)
            ncomp, comp = connected_components(graph, directed=False)
        else:
            ncomp, comp = 0, np.zeros(0, dtype=int)
        members = [[] for _ in range(ncomp)]
        for col, c in enumerate(comp):
            members[c].append(col)
        by_size = {}
        for cols in members:
            by_size.setdefault(len(cols), []).append(cols)
        # groups of equally sized diagonal blocks: (index array (nc, k), S blocks (nc, k, k))
        self.groups = []
        for k in sorted(by_size):
            idx = np.array(by_size[k], dtype=int)
            self.groups.append((idx, self.ZtZ[idx[:, :, None], idx[:, None, :]]))

    @classmethod
    def of(cls, model) -> "DesignStructure":
        st = model._cache.get("structure")
        if st is None:
            st = model._cache["structure"] = cls(model.X, list(model.Z))
        return st

    def block_apply(self, blocks, Y):
        """Multiply the block-diagonal matrix given by ``blocks`` into ``Y`` (q x r)."""
        out = np.zeros_like(Y)
        for (idx, _), Bk in zip(self.groups, blocks):
            out[idx] = np.matmul(Bk, Y[idx])
        return out

    def block_dense(self, blocks) -> np.ndarray:
        out = np.zeros((self.q, self.q))
        for (idx, _), Bk in zip(self.groups, blocks):
            out[idx[:, :, None], idx[:, None, :]] = Bk
        return out


class SufficientStats:
    """Design structure plus the response cross products."""

    def __init__(self, model):
        self.structure = st = DesignStructure.of(model)
        y = model.y
        self.y = y
        self.yty = float(y @ y)
        self.Xty = model.X.T @ y
        self.Zty = np.asarray(st.Zsp.T @ y).reshape(-1)


class CovarianceState:
    """All likelihood ingredients at one value of theta."""

    def __init__(self, stats: SufficientStats, lam: float, gamma):
        st = stats.structure
        self.stats, self.structure = stats, st
        self.lam = lam = float(lam)
        self.gamma = gamma = np.asarray(gamma, dtype=float)
        if not lam > 0 or np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
            raise NumericalError(f"invalid variance components lam={lam}, gamma={gamma}")
        N, p = st.N, st.p
        d = np.sqrt(gamma[st.term]) if st.q else np.zeros(0)

        logdet_m = 0.0
        kblocks, sk_blocks, w_blocks = [], [], []
        for idx, Sb in st.groups:
            db = d[idx]
            Mb = db[:, :, None] * Sb * db[:, None, :]
            Mb[:, np.arange(idx.shape[1]), np.arange(idx.shape[1])] += 1.0
            try:
                Lb = np.linalg.cholesky(Mb)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("I + DZ'ZD is not positive definite") from exc
            logdet_m += 2.0 * np.log(np.diagonal(Lb, axis1=1, axis2=2)).sum()
            Minv = np.linalg.inv(Mb)
            Kb = db[:, :, None] * Minv * db[:, None, :]
            SKb = np.matmul(Sb, Kb)
            kblocks.append(Kb)
            sk_blocks.append(SKb)
            w_blocks.append(Sb - np.matmul(SKb, Sb))
        self.logdet_m = logdet_m
        self.kblocks, self.w_blocks = kblocks, w_blocks

        kztx = st.block_apply(kblocks, st.ZtX)
        kzty = st.block_apply(kblocks, stats.Zty[:, None])[:, 0]
        self.kztx = kztx
        self.rt = st.ZtX - st.block_apply(sk_blocks, st.ZtX)          # lambda Z'V^{-1}X
        self.zty_t = stats.Zty - st.block_apply(sk_blocks, stats.Zty[:, None])[:, 0]
        at = st.XtX - st.ZtX.T @ kztx                                   # lambda X'V^{-1}X
        self.at = 0.5 * (at + at.T)
        self.xty_t = stats.Xty - st.ZtX.T @ kzty
        self.yvy_t = stats.yty - stats.Zty @ kzty

        if p:
            try:
                self.at_chol = linalg.cho_factor(self.at, lower=True)
            except linalg.LinAlgError as exc:
                raise RankDeficientError("X'V^{-1}X is not positive definite") from exc
            diag = np.diag(self.at_chol[0])
            if diag.min() <= 1e-7 * diag.max():
                raise RankDeficientError("X'V^{-1}X is numerically singular")
            self.logdet_at = 2.0 * np.log(diag).sum()
            self.beta = linalg.cho_solve(self.at_chol, self.xty_t)
            self.at_inv_rt = linalg.cho_solve(self.at_chol, self.rt.T)  # p x q
        else:
            self.at_chol = None
            self.logdet_at = 0.0
            self.beta = np.zeros(0)
            self.at_inv_rt = np.zeros((0, st.q))
        self.ypy_t = self.yvy_t - self.xty_t @ self.beta
        self.rho = self.zty_t - self.rt @ self.beta                   # lambda Z'Py

        w = st.block_dense(w_blocks)                                   # lambda Z'V^{-1}Z
        self.zvz_t = w
        self.zpz_t = w - self.rt @ self.at_inv_rt                      # lambda Z'PZ
        self._N, self._p = N, p

    # -- per-term summaries ------------------------------------------------
    def _traces(self, A):
        st = self.structure
        return np.bincount(st.term, weights=np.diag(A), minlength=st.s)

    def _frob(self, A):
        E = self.structure.E
        return E.T @ (A * A) @ E

    # -- REML ----------------------------------------------------------------
    def reml_loglik(self) -> float:
        lam, N, p = self.lam, self._N, self._p
        return -0.5 * ((N - p) * np.log(lam) + self.logdet_m + self.logdet_at
                       + self.ypy_t / lam)

    def reml_score(self) -> np.ndarray:
        lam, N, p = self.lam, self._N, self._p
        st = self.structure
        g0 = (self.ypy_t / lam - (N - p)) / (2 * lam)
        rho2 = np.bincount(st.term, weights=self.rho ** 2, minlength=st.s)
        gj = rho2 / (2 * lam) - 0.5 * self._traces(self.zpz_t)
        return np.concatenate([[g0], gj])

    def reml_hessian(self) -> np.ndarray:
        """Expected Hessian of the restricted log-likelihood."""
        return self._hessian(self._N - self._p, self.zpz_t)

    # -- ML ------------------------------------------------------------------
    def _ml_parts(self, beta):
        beta = self.beta if beta is None else np.asarray(beta, dtype=float)
        uvu_t = self.yvy_t - 2 * beta @ self.xty_t + beta @ self.at @ beta
        rho = self.zty_t - self.rt @ beta
        return beta, uvu_t, rho

    def ml_loglik(self, beta=None) -> float:
        _, uvu_t, _ = self._ml_parts(beta)
        return -0.5 * (self._N * np.log(self.lam) + self.logdet_m + uvu_t / self.lam)

    def ml_score(self, beta=None) -> np.ndarray:
        lam, N = self.lam, self._N
        st = self.structure
        beta, uvu_t, rho = self._ml_parts(beta)
        gb = (self.xty_t - self.at @ beta) / lam
        g0 = (uvu_t / lam - N) / (2 * lam)
        rho2 = np.bincount(st.term, weights=rho ** 2, minlength=st.s)
        gj = rho2 / (2 * lam) - 0.5 * self._traces(self.zvz_t)
        return np.concatenate([gb, [g0], gj])

    def ml_theta_hessian(self) -> np.ndarray:
        return self._hessian(self._N, self.zvz_t)

    def ml_hessian(self) -> np.ndarray:
        p, s = self._p, self.structure.s
        H = np.zeros((p + s + 1, p + s + 1))
        H[:p, :p] = -self.at / self.lam
        H[p:, p:] = self.ml_theta_hessian()
        return H

    def _hessian(self, dof, A_t):
        lam, s = self.lam, self.structure.s
        H = np.empty((s + 1, s + 1))
        H[0, 0] = -dof / (2 * lam ** 2)
        H[0, 1:] = H[1:, 0] = -self._traces(A_t) / (2 * lam)
        H[1:, 1:] = -0.5 * self._frob(A_t)
        return H

    # -- N-space factors used by the information assembly ----------------------
    def kdense(self) -> np.ndarray:
        return self.structure.block_dense(self.kblocks)

    def xtilde(self) -> np.ndarray:
        """``lambda V^{-1} X``."""
        st = self.structure
        return st.X - np.asarray(st.Zsp @ self.kztx)

    def vinv_z_t(self) -> np.ndarray:
        """``lambda V^{-1} Z`` (N x q)."""
        st = self.structure
        ks = st.block_apply(self.kblocks, st.ZtZ)
        return st.Z - np.asarray(st.Zsp @ ks)

    def pz_t(self) -> np.ndarray:
        """``lambda P Z`` (N x q)."""
        return self.vinv_z_t() - self.xtilde() @ self.at_inv_rt


def evaluate(model_or_stats, lam, gamma) -> CovarianceState:
    stats = model_or_stats if isinstance(model_or_stats, SufficientStats) else SufficientStats(model_or_stats)
    return CovarianceState(stats, lam, gamma)
