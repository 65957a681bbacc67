"""Shared fixtures: random designs and closed-form one-way expressions."""
import numpy as np

from poquim.model import ModelSpec, VarianceComponents, indicator


def random_model(rng, N=None, s=None, real_loadings=None):
    """Small random mixed model with 0/1 and real-valued loadings mixed."""
    N = N or int(rng.integers(8, 41))
    s = s or int(rng.integers(1, 3))
    p = int(rng.integers(1, 3))
    X = np.column_stack([np.ones(N)] + [rng.normal(size=N) for _ in range(p - 1)])
    Z = []
    for t in range(s):
        real = rng.random() < 0.5 if real_loadings is None else real_loadings
        k = int(rng.integers(2, max(3, N // 3)))
        labels = rng.integers(0, k, size=N)
        Zt = indicator(labels)
        if real:
            Zt = Zt * rng.uniform(0.3, 2.0, size=N)[:, None]
        Z.append(Zt)
    y = rng.normal(size=N) + Z[0] @ rng.normal(size=Z[0].shape[1])
    return ModelSpec(y, X, Z)


def random_theta(rng, s):
    return VarianceComponents(float(rng.uniform(0.5, 2.0)), rng.uniform(0.2, 2.0, size=s))


def rel_err(a, b):
    """Entrywise relative error; entries that are exactly zero in ``b`` are
    measured against the largest entry of ``b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    den = np.where(b != 0, np.abs(b), np.max(np.abs(b)))
    return float(np.max(np.abs(a - b) / den))


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


# -- balanced one-way closed forms ------------------------------------------------

def _sums(u):
    return (u.sum(1) ** 4).sum(), (u ** 4).sum()


def oneway_reml_parts(lam, g, u):
    """Observed and estimated REML POQUIM for the balanced one-way layout;
    ``u`` is the (m, n) array of residuals."""
    m, n = u.shape
    S4, s4 = _sums(u)
    d = 1 + g * n
    t0 = 1 - g / d - 1 / (d * m * n)
    t1 = (m - 1) * n / (m * d)
    t3 = (n * d ** 2 - (1 + g) ** 2) / (n ** 3 - 1)
    o00 = (t1 ** 2 - t0 ** 2 * n) / (4 * lam ** 4 * n * (n ** 3 - 1)) * (S4 - s4) + t0 ** 2 / (4 * lam ** 4) * s4
    o01 = ((m - 1) * (t1 * n - t0) / (4 * lam ** 3 * d ** 2 * m * (n ** 3 - 1)) * (S4 - s4)
           + (m - 1) * t0 / (4 * lam ** 3 * d ** 2 * m) * s4)
    o11 = (m - 1) ** 2 / (4 * lam ** 2 * d ** 4 * m ** 2) * S4
    e00 = (m * n - 1 - 1.5 * m * n * t0 ** 2 * ((1 + g) ** 2 - t3) - 1.5 * m * t1 ** 2 * t3) / (2 * lam ** 2)
    e01 = (m - 1) * n / (2 * lam * d) * (1 - 1.5 * ((t1 * n - t0) * t3 + (1 + g) ** 2 * t0) / d)
    e11 = -(m - 1) * (m - 3) * n ** 2 / (4 * m * d ** 2)
    return np.array([[o00, o01], [o01, o11]]), np.array([[e00, e01], [e01, e11]])


def oneway_reml_i2(lam, g, m, n):
    d = 1 + g * n
    return -np.array([[(m * n - 1) / (2 * lam ** 2), (m - 1) * n / (2 * lam * d)],
                      [(m - 1) * n / (2 * lam * d), (m - 1) * n ** 2 / (2 * d ** 2)]])


def oneway_ml_parts(lam, g, u):
    """ML POQUIM entries ordered (mu, lambda, gamma): returns (observed, estimated).

    The estimated gamma-gamma entry is ``-m n^2 / 4(1 + gamma n)^2``: the
    Gaussian term ``m n^2 / 2(1 + gamma n)^2`` minus three times half of it.
    """
    m, n = u.shape
    S3, s3 = (u.sum(1) ** 3).sum(), (u ** 3).sum()
    S4, s4 = _sums(u)
    d = 1 + g * n
    a = g * n + 1 - g
    T3 = (n * d ** 2 - (1 + g) ** 2) / (n ** 3 - 1)
    i11 = m * n / (lam * d)
    i12 = ((1 - g) / (n + 1) * S3 + (g * n + (1 - g) * n / (n + 1)) * s3) / (2 * lam ** 3 * d ** 2)
    i13 = S3 / (2 * lam ** 2 * d ** 3)
    o22 = (n * (n - a ** 2) / (4 * lam ** 4 * d ** 2 * n * (n ** 3 - 1)) * (S4 - s4)
           + a ** 2 / (4 * lam ** 4 * d ** 2) * s4)
    o23 = ((n + 1 - g) / (4 * lam ** 3 * d ** 3 * (n * n + n + 1)) * (S4 - s4)
           + a / (4 * lam ** 3 * d ** 3) * s4)
    o33 = S4 / (4 * lam ** 2 * d ** 4)
    e22 = m * n / (2 * lam ** 2) * (1 + 1.5 * T3 * ((a / d) ** 2 - n / d ** 2) - 1.5 * (a / d) ** 2 * (1 + g) ** 2)
    e23 = m * n / (2 * lam * d) * (1 - 1.5 * (n + 1 - g) * (n * d ** 2 - (1 + g) ** 2) / (d ** 2 * (n * n + n + 1))
                                   - 1.5 * a * (1 + g) ** 2 / d ** 2)
    e33 = -m * n ** 2 / (4 * d ** 2)
    obs = np.array([[0, i12, i13], [i12, o22, o23], [i13, o23, o33]])
    est = np.array([[i11, 0, 0], [0, e22, e23], [0, e23, e33]])
    return obs, est


def sigma_r11(I1, I2):
    """Gamma-gamma entry of I2^{-1} I1 I2^{-1} written out for the 2 x 2 case."""
    num = I1[1, 1] * I2[0, 0] ** 2 - 2 * I1[0, 1] * I2[0, 0] * I2[0, 1] + I1[0, 0] * I2[0, 1] ** 2
    return num / (I2[0, 0] * I2[1, 1] - I2[0, 1] ** 2) ** 2


def null_lambda(y2d):
    """REML estimate of lambda under gamma = 1, in closed form."""
    m, n = y2d.shape
    gm = y2d.mean(axis=1)
    sse = np.sum((y2d - gm[:, None]) ** 2)
    ssa = n * np.sum((gm - y2d.mean()) ** 2)
    return (sse + ssa / (n + 1)) / (m * n - 1)
