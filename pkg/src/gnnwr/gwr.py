"""Geographically weighted regression with Gaussian and bi-square kernels."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import MetricPanel, aicc, metric_panel
from .errors import (
    AICcUndefinedError,
    BandwidthError,
    ConfigError,
    LocalFitError,
    SearchError,
    ShapeError,
)
from .geodata import distance_matrix, format_float
from .olr import PIVOT_RTOL

FAMILIES = ("gaussian", "bisquare")
MODES = ("fixed", "adaptive")
_CHUNK_BYTES = 64 * 2**20


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus bandwidth: meters when fixed, neighbor count when adaptive."""

    family: str = "bisquare"
    mode: str = "adaptive"
    bandwidth: float = 100
    # exp(-d / b^2) instead of exp(-d^2 / b^2); kept for comparison only
    gaussian_unsquared: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"kernel family must be one of {FAMILIES}, got {self.family!r}")
        if self.mode not in MODES:
            raise ConfigError(f"bandwidth mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "fixed" and not self.bandwidth > 0:
            raise ConfigError(f"fixed bandwidth must be positive, got {self.bandwidth}")
        if self.mode == "adaptive" and (int(self.bandwidth) != self.bandwidth or self.bandwidth < 1):
            raise ConfigError(f"adaptive bandwidth must be a positive neighbor count, got {self.bandwidth}")

    @classmethod
    def fixed(cls, b, family="bisquare", **kw):
        return cls(family=family, mode="fixed", bandwidth=float(b), **kw)

    @classmethod
    def adaptive(cls, m, family="bisquare", **kw):
        return cls(family=family, mode="adaptive", bandwidth=int(m), **kw)

    def check_for(self, p):
        if self.mode == "adaptive" and self.bandwidth < p + 2:
            raise ConfigError(
                f"adaptive neighbor count m={int(self.bandwidth)} must be at least p+2={p + 2}"
            )

    def to_dict(self):
        return {
            "family": self.family,
            "mode": self.mode,
            "bandwidth": self.bandwidth,
            "gaussian_unsquared": self.gaussian_unsquared,
        }


def kernel_weight(d, spec, b):
    """Kernel weight of distance(s) ``d`` under resolved bandwidth(s) ``b``."""
    d = np.asarray(d, dtype=float)
    b = np.asarray(b, dtype=float)
    if spec.family == "gaussian":
        if spec.gaussian_unsquared:
            return np.exp(-d / (b * b))
        u = d / b
        return np.exp(-u * u)
    u = d / b
    return np.where(d < b, (1.0 - u * u) ** 2, 0.0)


def resolve_bandwidth(spec, distances):
    """Bandwidth per query row.

    Adaptive bandwidth is the distance to the m-th nearest anchor, not
    counting one coincident anchor (distance exactly 0): for a training point
    that is the point itself. Ties resolve to the tied distance.
    """
    D = np.asarray(distances, dtype=float)
    single = D.ndim == 1
    D = np.atleast_2d(D)
    if spec.mode == "fixed":
        out = np.full(D.shape[0], float(spec.bandwidth))
        return float(out[0]) if single else out
    m = int(spec.bandwidth)
    srt = np.sort(D, axis=1)
    idx = m - 1 + (srt[:, 0] == 0.0)
    if np.any(idx >= D.shape[1]):
        avail = D.shape[1] - int(np.max(srt[:, 0] == 0.0))
        raise BandwidthError(f"adaptive bandwidth needs {m} neighbors but only {avail} anchors available")
    out = srt[np.arange(D.shape[0]), idx]
    return float(out[0]) if single else out


def _local_solve(X, y, W, Xq, want_hat=True, raise_on_singular=True):
    """Weighted least squares for each weight row.

    Returns (beta (m,k), hat rows (m,n), singular mask). Hat rows are
    s_i = x_q^T (X^T W X)^{-1} X^T W, obtained from the QR factor of sqrt(W) X.
    With ``want_hat="diag"`` the queries must be the training rows and only
    the diagonal s_ii is returned.
    """
    m_total, n = W.shape
    k = X.shape[1]
    chunk = max(1, _CHUNK_BYTES // (8 * n * k * 2))
    betas = np.full((m_total, k), np.nan)
    diag_only = want_hat == "diag"
    if diag_only:
        hat = np.zeros(m_total)
    else:
        hat = np.zeros((m_total, n)) if want_hat else None
    bad = np.zeros(m_total, dtype=bool)
    for start in range(0, m_total, chunk):
        sl = slice(start, min(start + chunk, m_total))
        sw = np.sqrt(W[sl])
        A = sw[:, :, None] * X[None, :, :]
        Q, R = np.linalg.qr(A)
        diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
        tol = PIVOT_RTOL * np.max(np.abs(A), axis=(1, 2))
        sing = np.any(diag <= tol[:, None], axis=1)
        if np.any(sing):
            if raise_on_singular:
                i = start + int(np.argmax(sing))
                raise LocalFitError(
                    f"local weighted design at point {i} is rank deficient "
                    "(too few neighbors with nonzero weight); use a larger bandwidth",
                    index=i,
                )
            bad[sl] = sing
            R = R.copy()
            R[sing] = np.eye(k)
        qty = np.einsum("mnk,mn->mk", Q, sw * y[None, :])
        betas[sl] = np.linalg.solve(R, qty[:, :, None])[:, :, 0]
        z = np.linalg.solve(np.swapaxes(R, 1, 2), Xq[sl][:, :, None])[:, :, 0]
        if diag_only:
            r = np.arange(sl.stop - sl.start)
            hat[sl] = np.einsum("mk,mk->m", z, Q[r, sl.start + r]) * sw[r, sl.start + r]
        elif want_hat:
            hat[sl] = np.einsum("mk,mnk->mn", z, Q) * sw
        if np.any(sing):
            betas[sl][sing] = np.nan
    return betas, hat, bad


@dataclass
class GwrModel:
    kernel: KernelSpec
    local_beta: np.ndarray
    hat: np.ndarray
    fitted: np.ndarray
    bandwidths: np.ndarray
    rss: float
    trace: float
    aicc: float
    metrics: MetricPanel
    anchors: np.ndarray
    X: np.ndarray
    y: np.ndarray
    names: tuple[str, ...] = field(default=())

    def to_dict(self):
        return {
            "kernel": self.kernel.to_dict(),
            "names": ["intercept", *self.names],
            "n": int(self.X.shape[0]),
            "rss": self.rss,
            "trace": self.trace,
            "aicc": self.aicc,
            "metrics": self.metrics.to_dict(),
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_local_beta(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y"] + [f"beta_{j}" for j in range(self.local_beta.shape[1])])
            for (cx, cy), row in zip(self.anchors, self.local_beta):
                w.writerow([format_float(cx), format_float(cy), *map(format_float, row)])


def gwr_weights(spec, D):
    b = resolve_bandwidth(spec, D)
    return kernel_weight(D, spec, b[:, None]), b


def fit_gwr(ds, spec, D=None):
    """Fit one local regression per training point."""
    spec.check_for(ds.p)
    if D is None:
        D = distance_matrix(ds, ds)
    W, b = gwr_weights(spec, D)
    betas, hat, _ = _local_solve(ds.X, ds.y, W, ds.X)
    fitted = np.einsum("ik,ik->i", betas, ds.X)
    resid = ds.y - fitted
    rss = float(resid @ resid)
    trace = float(np.trace(hat))
    n = ds.n
    score = aicc(n, rss / n, trace)
    return GwrModel(
        kernel=spec,
        local_beta=betas,
        hat=hat,
        fitted=fitted,
        bandwidths=b,
        rss=rss,
        trace=trace,
        aicc=score,
        metrics=metric_panel(ds.y, fitted, aicc=score, warn=False),
        anchors=ds.coords,
        X=ds.X,
        y=ds.y,
        names=tuple(ds.names),
    )


def gwr_aicc(ds, spec, D=None):
    """AICc of a GWR fit, computing only the hat diagonal."""
    spec.check_for(ds.p)
    if D is None:
        D = distance_matrix(ds, ds)
    W, _ = gwr_weights(spec, D)
    betas, hat_diag, _ = _local_solve(ds.X, ds.y, W, ds.X, want_hat="diag")
    fitted = np.einsum("ik,ik->i", betas, ds.X)
    resid = ds.y - fitted
    n = ds.n
    return aicc(n, float(resid @ resid) / n, float(np.sum(hat_diag)))


_INV_PHI = (math.sqrt(5) - 1) / 2


def golden_section_int(f, lo, hi):
    """Minimize ``f`` over integers in [lo, hi] by golden-section search.

    Probe points are rounded to integers and every evaluation is memoized.
    The bracket shrinks until at most three candidates remain, which are
    then scanned. Returns ``(argmin, min, evaluations)``.
    """
    lo, hi = int(lo), int(hi)
    if lo > hi:
        raise SearchError(f"empty search interval [{lo}, {hi}]")
    memo = {}

    def g(m):
        if m not in memo:
            memo[m] = f(m)
        return memo[m]

    a, b = lo, hi
    while b - a > 2:
        c = a + int(round((1 - _INV_PHI) * (b - a)))
        d = a + int(round(_INV_PHI * (b - a)))
        if d <= c:
            d = c + 1
        if g(c) <= g(d):
            b = d
        else:
            a = c
    best_m, best_v = None, math.inf
    for m in range(a, b + 1):
        v = g(m)
        if v < best_v:
            best_m, best_v = m, v
    if best_m is None:
        finite = {m: v for m, v in memo.items() if math.isfinite(v)}
        if not finite:
            raise SearchError("objective is non-finite at every probed point")
        best_m = min(finite, key=lambda m: (finite[m], m))
        best_v = finite[best_m]
    return best_m, best_v, dict(memo)


def golden_search_bandwidth(ds, family, m_lo, m_hi, D=None, aicc_fn=None):
    """Adaptive neighbor count minimizing AICc; returns ``(m, aicc)``.

    ``aicc_fn(m)`` replaces the GWR fit when given (used to search over a
    precomputed table).
    """
    p = ds.p
    if m_lo < p + 2:
        raise SearchError(f"search lower bound {m_lo} must be at least p+2={p + 2}")
    if m_hi > ds.n - 1:
        raise SearchError(f"search upper bound {m_hi} must be at most n-1={ds.n - 1}")
    if m_lo > m_hi:
        raise SearchError(f"empty search interval [{m_lo}, {m_hi}]")
    if aicc_fn is None:
        if D is None:
            D = distance_matrix(ds, ds)

        def aicc_fn(m):
            try:
                return gwr_aicc(ds, KernelSpec.adaptive(m, family), D)
            except (LocalFitError, AICcUndefinedError, BandwidthError):
                return math.inf

    m, v, _ = golden_section_int(aicc_fn, m_lo, m_hi)
    return m, v


def predict_gwr(model, points_new, X_new, return_errors=False):
    """Local predictions at new locations using the training anchors only.

    Adaptive bandwidths are re-resolved from query-to-anchor distances. Points
    whose local design is singular come back as NaN; with
    ``return_errors=True`` their indices and messages are returned too.
    """
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim != 2 or X_new.shape[1] != model.X.shape[1]:
        raise ShapeError(f"X_new must have {model.X.shape[1]} columns, got {X_new.shape}")
    D = distance_matrix(points_new, model.anchors)
    if D.shape[0] != X_new.shape[0]:
        raise ShapeError("points_new and X_new differ in row count")
    W, _ = gwr_weights(model.kernel, D)
    betas, _, bad = _local_solve(model.X, model.y, W, X_new, want_hat=False, raise_on_singular=False)
    y_hat = np.einsum("ik,ik->i", betas, X_new)
    if return_errors:
        errors = {
            int(i): "local weighted design is rank deficient; use a larger bandwidth"
            for i in np.flatnonzero(bad)
        }
        return y_hat, errors
    return y_hat
