"""Index classes of the moment-coefficient maps.

For an ordered quadruple ``(i1, i2, i3, i4)`` the fourth cumulant of
``u_i1 u_i2 u_i3 u_i4`` is ``sum_t kappa_t f_t`` with

    f_t = sum_l z_{i1,tl} z_{i2,tl} z_{i3,tl} z_{i4,tl},    f_0 = [i1 = i2 = i3 = i4].

Two quadruples belong to the same class when their coefficient vectors
``(f_0, ..., f_s)`` coincide; quadruples with an all-zero vector carry no
fourth-order information and are excluded.  Triples are classified the same
way with third-order products.

Two engines produce the partition:

* ``"enumerate"`` lists every candidate tuple.  A tuple has a nonzero key only
  if all its indices load on one common column of some Z_t (or all are
  equal), so candidates are generated group by group and deduplicated in
  canonical (sorted) form with permutation multiplicities.
* ``"factor"`` handles designs whose terms are all plain factors (0/1 with one
  nonzero per row).  There the key of a tuple is the indicator of the set T
  of terms on which all its indices share a level, and class sums follow by
  inclusion-exclusion over cells of joint levels, without listing tuples.

Both engines expose the same interface: class keys, ordered cardinalities
and class sums of products of matrix entries.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations, combinations_with_replacement

import numpy as np
from scipy import sparse

from .errors import ConfigError, EnumerationBudgetError

DEFAULT_BUDGET = 2e8
KEY_PRECISION = 1e-9


@dataclass(frozen=True)
class ClassKey:
    """Coefficient vector ``(f_0, ..., f_s)`` identifying a class."""

    coeff: tuple

    def __iter__(self):
        return iter(self.coeff)

    def is_zero(self) -> bool:
        return not any(self.coeff)


class IndexClassPartition:
    """Common interface.  Subclasses provide the class sums."""

    order: int
    keys: list
    cardinalities: np.ndarray

    @property
    def L(self) -> int:
        return len(self.keys)

    @property
    def classes(self):
        return list(zip(self.keys, self.cardinalities.tolist()))

    def pair_sums(self, ops) -> np.ndarray:
        """``S[l, a, b] = sum over ordered members of class l of a[i1,i2] b[i3,i4]``
        for every pair of operands in ``ops`` (order 4 only)."""
        raise NotImplementedError

    def triple_sums(self, vecs, ops) -> np.ndarray:
        """``S[l, a, b] = sum over ordered members of v_a[i1] C_b[i2,i3]`` (order 3)."""
        raise NotImplementedError

    def power_sums(self, u) -> np.ndarray:
        """``sum over ordered members of u_i1 ... u_ik`` per class."""
        raise NotImplementedError

    def summary_rows(self):
        for l, (key, h) in enumerate(zip(self.keys, self.cardinalities.tolist()), start=1):
            yield l, key.coeff, int(h)


# -- helpers -------------------------------------------------------------------

def _term_columns(model):
    """Per term, list of (column index, sorted rows with nonzero loading)."""
    out = []
    for Zt in model.Z:
        cols = []
        nz = Zt != 0
        for l in range(Zt.shape[1]):
            rows = np.flatnonzero(nz[:, l])
            if rows.size:
                cols.append(rows)
        out.append(cols)
    return out


def _is_factor(Zt) -> bool:
    return (np.all((Zt == 0) | (Zt == 1)) and np.all((Zt != 0).sum(axis=1) <= 1))


@lru_cache(maxsize=None)
def _template(g: int, order: int) -> np.ndarray:
    return np.array(list(combinations_with_replacement(range(g), order)), dtype=np.int64)


def _multiplicity(tuples: np.ndarray) -> np.ndarray:
    """Number of distinct orderings of each sorted tuple."""
    k = tuples.shape[1]
    ties = np.ones(tuples.shape[0], dtype=np.int64)
    run = np.ones(tuples.shape[0], dtype=np.int64)
    for r in range(1, k):
        same = tuples[:, r] == tuples[:, r - 1]
        run = np.where(same, run + 1, 1)
        ties *= np.where(same, run, 1)
    return math.factorial(k) // ties


def _row_dots(A, B):
    return np.einsum("ij,ij->i", A, B)


# -- enumeration engine ----------------------------------------------------------

class EnumeratedPartition(IndexClassPartition):
    """Partition with explicitly listed canonical members."""

    def __init__(self, order, keys, tuples, mult, label):
        self.order = order
        self.keys = keys
        self.tuples = tuples          # (n, order) sorted index tuples
        self.mult = mult              # ordered count per canonical tuple
        self.label = label            # class index per canonical tuple
        self.cardinalities = np.bincount(label, weights=mult, minlength=len(keys)).astype(np.int64)

    def members(self, l):
        sel = self.label == l
        return list(zip(map(tuple, self.tuples[sel]), self.mult[sel].tolist()))

    @property
    def classes(self):
        return [(k, int(h), self.members(l))
                for l, (k, h) in enumerate(zip(self.keys, self.cardinalities))]

    def _chunks(self, width):
        n = self.tuples.shape[0]
        step = max(1, int(4e6 // max(width, 1)))
        for a in range(0, n, step):
            yield slice(a, min(n, a + step))

    def pair_sums(self, ops):
        if self.order != 4:
            raise ConfigError("pair sums need a quadruple partition")
        J = len(ops)
        out = np.zeros((self.L, J, J))
        pairings = [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]
        width = max(op.rank for op in ops) + 1
        for sl in self._chunks(width):
            T = self.tuples[sl]
            w = self.mult[sl] / 6.0
            lab = self.label[sl]
            for (a, b), (c, d) in pairings:
                E1 = np.stack([op.entries(T[:, a], T[:, b]) for op in ops], axis=1)
                E2 = np.stack([op.entries(T[:, c], T[:, d]) for op in ops], axis=1)
                # symmetrize within the pairing: a[xy] b[zw] + a[zw] b[xy]
                P = (E1[:, :, None] * E2[:, None, :] + E2[:, :, None] * E1[:, None, :])
                P *= w[:, None, None]
                np.add.at(out, lab, P)
        return out

    def triple_sums(self, vecs, ops):
        if self.order != 3:
            raise ConfigError("triple sums need a triple partition")
        vecs = np.asarray(vecs)
        out = np.zeros((self.L, vecs.shape[1], len(ops)))
        width = max([op.rank for op in ops] + [1]) + 1
        for sl in self._chunks(width):
            T = self.tuples[sl]
            w = self.mult[sl] / 3.0
            lab = self.label[sl]
            acc = 0.0
            for x, (y, z) in [(0, (1, 2)), (1, (0, 2)), (2, (0, 1))]:
                Cv = np.stack([op.entries(T[:, y], T[:, z]) for op in ops], axis=1)
                acc = acc + vecs[T[:, x]][:, :, None] * Cv[:, None, :]
            np.add.at(out, lab, acc * w[:, None, None])
        return out

    def power_sums(self, u):
        u = np.asarray(u, dtype=float)
        vals = np.prod(u[self.tuples], axis=1) * self.mult
        return np.bincount(self.label, weights=vals, minlength=self.L)


def _enumerate(model, order, budget):
    N = model.N
    groups = [rows for cols in _term_columns(model) for rows in cols]
    cost = sum(float(g.size) ** order for g in groups)
    if cost > budget:
        raise EnumerationBudgetError(
            f"sum of |group|^{order} = {cost:.3g} exceeds the enumeration budget {budget:.3g}")
    cands = [np.repeat(np.arange(N)[:, None], order, axis=1)]
    for rows in groups:
        cands.append(rows[_template(rows.size, order)])
    tuples = np.unique(np.concatenate(cands, axis=0), axis=0)

    keys = np.empty((tuples.shape[0], model.s + 1))
    keys[:, 0] = np.all(tuples == tuples[:, :1], axis=1)
    for t, Zt in enumerate(model.Z, start=1):
        step = max(1, int(2e6 // max(Zt.shape[1], 1)))
        for a in range(0, tuples.shape[0], step):
            T = tuples[a:a + step]
            prod = Zt[T[:, 0]].copy()
            for r in range(1, order):
                prod *= Zt[T[:, r]]
            keys[a:a + step, t] = prod.sum(axis=1)

    scale = np.max(np.abs(keys), axis=0)
    scale[scale == 0] = 1.0
    quant = np.round(keys / scale / KEY_PRECISION).astype(np.int64)
    keep = np.any(quant != 0, axis=1)
    tuples, keys, quant = tuples[keep], keys[keep], quant[keep]
    uq, label = np.unique(quant, axis=0, return_inverse=True)
    label = label.reshape(-1)
    class_keys = []
    for l in range(uq.shape[0]):
        first = np.flatnonzero(label == l)[0]
        class_keys.append(ClassKey(tuple(float(v) for v in keys[first])))
    return EnumeratedPartition(order, class_keys, tuples, _multiplicity(tuples), label)


# -- factor engine -------------------------------------------------------------

class FactorPartition(IndexClassPartition):
    """Inclusion-exclusion over cells of shared levels for pure factor designs.

    For a nonempty set U of terms (0 standing for the error term), the cells
    of U group observations with identical levels on every factor in U; for
    0 in U every cell is a single observation.  The ordered tuples inside
    cells of U are exactly those whose key is 1 on U (and possibly more), so
    the class with key indicator T collects
    ``sum_{U >= T} (-1)^{|U - T|} sum over cells of U``.
    """

    def __init__(self, order, keys, subsets, cells, mobius):
        self.order = order
        self.keys = keys
        self.subsets = subsets        # list of frozensets
        self.cells = cells            # sparse (ncells, N) indicators, one per subset
        self.mobius = mobius          # (L, n_subsets)
        sizes = [np.asarray(E.sum(axis=1)).reshape(-1) for E in cells]
        self.cardinalities = np.rint(
            mobius @ np.array([np.sum(c ** order) for c in sizes])).astype(np.int64)

    def pair_sums(self, ops):
        if self.order != 4:
            raise ConfigError("pair sums need a quadruple partition")
        per = []
        for E in self.cells:
            cs = np.stack([op.cell_sums(E) for op in ops], axis=1)
            per.append(cs.T @ cs)
        return np.tensordot(self.mobius, np.stack(per), axes=(1, 0))

    def triple_sums(self, vecs, ops):
        if self.order != 3:
            raise ConfigError("triple sums need a triple partition")
        vecs = np.asarray(vecs)
        per = []
        for E in self.cells:
            cv = np.asarray(E @ vecs)
            cs = np.stack([op.cell_sums(E) for op in ops], axis=1)
            per.append(cv.T @ cs)
        return np.tensordot(self.mobius, np.stack(per), axes=(1, 0))

    def power_sums(self, u):
        u = np.asarray(u, dtype=float)
        per = np.array([np.sum(np.asarray(E @ u) ** self.order) for E in self.cells])
        return self.mobius @ per


def _factor_partition(model, order):
    N, s = model.N, model.s
    levels = []
    for Zt in model.Z:
        lv = np.full(N, -1)
        r, c = np.nonzero(Zt)
        lv[r] = c
        levels.append(lv)
    subsets, cells = [], []
    for k in range(1, s + 2):
        for U in combinations(range(s + 1), k):
            terms = [t for t in U if t > 0]
            valid = np.ones(N, dtype=bool)
            for t in terms:
                valid &= levels[t - 1] >= 0
            obs = np.flatnonzero(valid)
            if 0 in U:
                cid = np.arange(obs.size)
            elif obs.size:
                codes = np.stack([levels[t - 1][obs] for t in terms], axis=1)
                _, cid = np.unique(codes, axis=0, return_inverse=True)
                cid = cid.reshape(-1)
            else:
                cid = np.zeros(0, dtype=int)
            ncell = int(cid.max()) + 1 if cid.size else 0
            E = sparse.csr_matrix((np.ones(obs.size), (cid, obs)), shape=(ncell, N))
            subsets.append(frozenset(U))
            cells.append(E)
    mob = np.array([[(-1.0) ** len(U - T) if U >= T else 0.0 for U in subsets]
                    for T in subsets])
    sizes = [np.asarray(E.sum(axis=1)).reshape(-1) for E in cells]
    h = mob @ np.array([np.sum(c ** order) for c in sizes])
    keep = np.flatnonzero(np.rint(h) > 0)
    keyvecs = [tuple(1.0 if t in subsets[i] else 0.0 for t in range(s + 1)) for i in keep]
    order_idx = sorted(range(len(keep)), key=lambda i: keyvecs[i])
    keep = keep[order_idx]
    keys = [ClassKey(keyvecs[i]) for i in order_idx]
    return FactorPartition(order, keys, subsets, cells, mob[keep])


# -- public API ----------------------------------------------------------------

def _classify(model, order, engine, budget):
    if engine == "auto":
        engine = "factor" if model.s and all(_is_factor(Zt) for Zt in model.Z) else "enumerate"
    cache_key = ("partition", order, engine, budget)
    part = model._cache.get(cache_key)
    if part is not None:
        return part
    if engine == "factor":
        if not all(_is_factor(Zt) for Zt in model.Z):
            raise ConfigError("the factor engine needs 0/1 designs with one level per row")
        part = _factor_partition(model, order)
    elif engine == "enumerate":
        part = _enumerate(model, order, budget)
    else:
        raise ConfigError(f"unknown engine {engine!r}")
    model._cache[cache_key] = part
    return part


def classify_quadruples(model, engine: str = "auto", budget: float = DEFAULT_BUDGET):
    """Partition the ordered quadruples with nonzero fourth-order key."""
    return _classify(model, 4, engine, budget)


def classify_triples(model, engine: str = "auto", budget: float = DEFAULT_BUDGET):
    """Partition the ordered triples with nonzero third-order key."""
    return _classify(model, 3, engine, budget)


class DenseOperand:
    """Adapter so plain N x N arrays can be summed over classes."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)
        self.rank = 1

    def entries(self, i, j):
        return self.A[i, j]

    def cell_sums(self, E):
        return np.asarray((E @ sparse.csr_matrix(self.A) @ E.T).diagonal()).reshape(-1)


def class_coefficients_reml(partition, B, j, k) -> np.ndarray:
    """Class means of ``B_j[i1,i2] B_k[i3,i4]`` over ordered members.

    ``B`` is a :class:`~poquim.likelihood.RemlScoreParts` or a list of matrices.
    """
    mats = B.B if hasattr(B, "B") else B
    S = partition.pair_sums([DenseOperand(mats[j]), DenseOperand(mats[k])])
    return S[:, 0, 1] / partition.cardinalities


def class_coefficients_ml(partition3, partition4, C, j, k):
    """Class means ``c1`` of ``q_j[i1] C_k[i2,i3]`` over triples and ``c2`` of
    ``C_j[i1,i2] C_k[i3,i4]`` over quadruples."""
    c1 = partition3.triple_sums(C.q[:, [j]], [DenseOperand(C.C[k])])[:, 0, 0]
    c1 = c1 / partition3.cardinalities
    return c1, class_coefficients_reml(partition4, C.C, j, k)
