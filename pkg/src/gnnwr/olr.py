"""Global ordinary least squares: the baseline model and the GNNWR coefficient anchor."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import CollinearityError, DegenerateTestError, DomainError, ShapeError
from .stats import t_two_sided_p

PIVOT_RTOL = 1e-10


def pivot_tolerance(A):
    return PIVOT_RTOL * float(np.max(np.abs(A))) if A.size else 0.0


def lstsq_qr(A, b, names=None):
    """Least squares through column-pivoted QR.

    Returns ``(beta, Q, R, perm)``. Raises :class:`CollinearityError` when a
    pivot falls under ``1e-10 * max|A|``; the message names the columns that
    were pivoted out.
    """
    Q, R, perm = qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = pivot_tolerance(A)
    rank = int(np.sum(diag > tol))
    if rank < A.shape[1]:
        dropped = [int(j) for j in perm[rank:]]
        labels = [names[j] if names is not None else f"column {j}" for j in dropped]
        raise CollinearityError(
            f"design matrix is rank deficient (rank {rank} of {A.shape[1]}); "
            f"dependent columns: {', '.join(labels)}",
            columns=labels,
        )
    z = solve_triangular(R, Q.T @ b)
    beta = np.empty_like(z)
    beta[perm] = z
    return beta, Q, R, perm


@dataclass
class OlrModel:
    beta_hat: np.ndarray
    sigma2_hat: float
    rss: float
    hat_trace: float
    n: int
    names: tuple[str, ...]
    t_pvalues: np.ndarray | None = None
    vif: np.ndarray | None = None
    std_err: np.ndarray | None = None

    @property
    def p(self):
        return len(self.beta_hat) - 1

    @property
    def df_resid(self):
        return self.n - self.p - 1

    def to_dict(self):
        def arr(a):
            return None if a is None else [float(v) for v in a]

        return {
            "names": ["intercept", *self.names],
            "beta": arr(self.beta_hat),
            "sigma2": self.sigma2_hat,
            "rss": self.rss,
            "hat_trace": self.hat_trace,
            "n": self.n,
            "std_err": arr(self.std_err),
            "t_pvalues": arr(self.t_pvalues),
            "vif": arr(self.vif),
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def fit_olr(ds, with_tests=True):
    """Fit y = X beta by least squares on a dataset (intercept column included)."""
    X, y = ds.X, ds.y
    n, k = X.shape
    beta, Q, R, perm = lstsq_qr(X, y, names=["intercept", *ds.names])
    resid = y - X @ beta
    rss = float(resid @ resid)
    df = n - k
    # tr(H) = tr(Q Q^T) = sum of squared entries of Q
    hat_trace = float(np.sum(Q * Q))
    model = OlrModel(
        beta_hat=beta,
        sigma2_hat=rss / df if df > 0 else math.nan,
        rss=rss,
        hat_trace=hat_trace,
        n=n,
        names=tuple(ds.names),
    )
    if with_tests and df >= 1:
        # (X^T X)^{-1} diagonal from the pivoted R factor
        Rinv = solve_triangular(R, np.eye(k))
        cov_diag = np.empty(k)
        cov_diag[perm] = np.sum(Rinv * Rinv, axis=1)
        model.std_err = np.sqrt(model.sigma2_hat * cov_diag)
        if model.sigma2_hat > 0:
            model.t_pvalues = coefficient_tests(model, ds)
        if ds.p >= 2:
            model.vif = vif(ds)
    return model


def predict_olr(model, X_new):
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new[None, :]
    if X_new.shape[1] != len(model.beta_hat):
        raise ShapeError(f"expected {len(model.beta_hat)} columns, got {X_new.shape[1]}")
    return X_new @ model.beta_hat


def coefficient_tests(model, ds):
    """Two-sided p-values of H0: beta_k = 0 for the p covariates (intercept excluded)."""
    df = model.df_resid
    if df < 1:
        raise DomainError("need n - p - 1 >= 1 for coefficient tests")
    if not model.sigma2_hat > 0:
        raise DegenerateTestError("residual variance is zero (perfect fit); t-tests undefined")
    se = model.std_err
    if se is None:
        XtX_inv = np.linalg.inv(ds.X.T @ ds.X)
        se = np.sqrt(model.sigma2_hat * np.diag(XtX_inv))
    t = model.beta_hat[1:] / se[1:]
    return np.array([t_two_sided_p(float(tk), df) for tk in t])


def vif(ds):
    """Variance inflation factor per covariate; +inf for exact collinearity."""
    Z = ds.X[:, 1:]
    n, p = Z.shape
    if p < 2:
        raise DomainError("VIF needs at least two covariates")
    out = np.empty(p)
    ones = np.ones((n, 1))
    for k in range(p):
        target = Z[:, k]
        others = np.hstack([ones, np.delete(Z, k, axis=1)])
        try:
            beta, *_ = lstsq_qr(others, target)
        except CollinearityError:
            out[k] = math.inf
            continue
        resid = target - others @ beta
        tss = float(np.sum((target - target.mean()) ** 2))
        rss = float(resid @ resid)
        if tss == 0 or rss <= PIVOT_RTOL**2 * tss:
            out[k] = math.inf
        else:
            out[k] = tss / rss
    return out


def ols_hat_matrix(X):
    """H = X (X^T X)^{-1} X^T via the pivoted QR factor."""
    _, Q, _, _ = lstsq_qr(X, np.zeros(X.shape[0]))
    return Q @ Q.T
