"""Reference implementations used only by the tests.

Each one takes a different computational route from the package code so an
agreement between the two is evidence, not a tautology.
"""

import math
from fractions import Fraction

import mpmath
import numpy as np


def exact_lstsq(X, y):
    """Least squares by Gaussian elimination on the normal equations in exact rationals."""
    X = [[Fraction(float(v)) for v in row] for row in np.asarray(X)]
    y = [Fraction(float(v)) for v in np.asarray(y)]
    k = len(X[0])
    A = [[sum(r[i] * r[j] for r in X) for j in range(k)] for i in range(k)]
    b = [sum(r[i] * yy for r, yy in zip(X, y)) for i in range(k)]
    for col in range(k):
        piv = next(r for r in range(col, k) if A[r][col] != 0)
        A[col], A[piv] = A[piv], A[col]
        b[col], b[piv] = b[piv], b[col]
        for r in range(col + 1, k):
            f = A[r][col] / A[col][col]
            if f:
                A[r] = [a - f * c for a, c in zip(A[r], A[col])]
                b[r] -= f * b[col]
    beta = [Fraction(0)] * k
    for i in range(k - 1, -1, -1):
        s = b[i] - sum(A[i][j] * beta[j] for j in range(i + 1, k))
        beta[i] = s / A[i][i]
    return np.array([float(v) for v in beta])


def float_elimination_solve(A, b):
    """Dense solve by Gaussian elimination with partial pivoting, plain Python floats."""
    A = [list(map(float, row)) for row in A]
    b = list(map(float, b))
    k = len(b)
    for col in range(k):
        piv = max(range(col, k), key=lambda r: abs(A[r][col]))
        A[col], A[piv] = A[piv], A[col]
        b[col], b[piv] = b[piv], b[col]
        for r in range(col + 1, k):
            f = A[r][col] / A[col][col]
            for c in range(col, k):
                A[r][c] -= f * A[col][c]
            b[r] -= f * b[col]
    x = [0.0] * k
    for i in range(k - 1, -1, -1):
        x[i] = (b[i] - sum(A[i][j] * x[j] for j in range(i + 1, k))) / A[i][i]
    return np.array(x)


def snyder_utm(lon, lat, zone):
    """Forward UTM via the classic power series in the longitude difference (WGS84)."""
    a = 6378137.0
    f = 1 / 298.257223563
    k0 = 0.9996
    e2 = f * (2 - f)
    ep2 = e2 / (1 - e2)
    phi = math.radians(lat)
    lam0 = math.radians(6 * zone - 183)
    N = a / math.sqrt(1 - e2 * math.sin(phi) ** 2)
    T = math.tan(phi) ** 2
    C = ep2 * math.cos(phi) ** 2
    A = (math.radians(lon) - lam0) * math.cos(phi)
    e4, e6 = e2 * e2, e2 * e2 * e2
    M = a * (
        (1 - e2 / 4 - 3 * e4 / 64 - 5 * e6 / 256) * phi
        - (3 * e2 / 8 + 3 * e4 / 32 + 45 * e6 / 1024) * math.sin(2 * phi)
        + (15 * e4 / 256 + 45 * e6 / 1024) * math.sin(4 * phi)
        - (35 * e6 / 3072) * math.sin(6 * phi)
    )
    x = k0 * N * (A + (1 - T + C) * A**3 / 6 + (5 - 18 * T + T * T + 72 * C - 58 * ep2) * A**5 / 120)
    y = k0 * (
        M
        + N
        * math.tan(phi)
        * (
            A * A / 2
            + (5 - T + 9 * C + 4 * C * C) * A**4 / 24
            + (61 - 58 * T + T * T + 600 * C - 330 * ep2) * A**6 / 720
        )
    )
    x += 500000.0
    if lat < 0:
        y += 10_000_000.0
    return x, y


def mp_f_cdf(x, d1, d2, dps=50):
    with mpmath.workdps(dps):
        x, d1, d2 = mpmath.mpf(x), mpmath.mpf(d1), mpmath.mpf(d2)
        if x <= 0:
            return 0.0
        z = d1 * x / (d1 * x + d2)
        return float(mpmath.betainc(d1 / 2, d2 / 2, 0, z, regularized=True))


def mp_t_two_sided(t, df, dps=50):
    with mpmath.workdps(dps):
        t, df = mpmath.mpf(t), mpmath.mpf(df)
        z = df / (df + t * t)
        return float(mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, z, regularized=True))


def scalar_distances(q, a):
    out = np.empty((len(q), len(a)))
    for i, (qx, qy) in enumerate(q):
        for j, (ax, ay) in enumerate(a):
            out[i, j] = math.hypot(qx - ax, qy - ay)
    return out


def dense_gamma(weights, X, k):
    """gamma_1, gamma_2 from explicitly formed B_k and centering matrices."""
    n = X.shape[0]
    proj = np.linalg.inv(X.T @ X) @ X.T
    B = np.empty((n, n))
    for i in range(n):
        W = np.diag(weights[i])
        B[i] = W[k] @ proj
    C = np.eye(n) - np.ones((n, n)) / n
    M = B.T @ C @ B / n
    return float(np.trace(M)), float(np.trace(M @ M))


def aux_vif(X):
    """VIF_j = 1 / (1 - R^2_j) from regressing column j on the other covariates."""
    Z = X[:, 1:]
    out = []
    for j in range(Z.shape[1]):
        others = np.column_stack([np.ones(len(Z)), np.delete(Z, j, axis=1)])
        coef = float_elimination_solve(others.T @ others, others.T @ Z[:, j])
        resid = Z[:, j] - others @ coef
        tss = np.sum((Z[:, j] - Z[:, j].mean()) ** 2)
        out.append(tss / np.sum(resid**2))
    return np.array(out)
