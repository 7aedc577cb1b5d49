"""Fit metrics, AICc, and the hat-matrix based non-stationarity tests."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import AICcUndefinedError, DegenerateTestError, DomainError, ReportError, ShapeError
from .geodata import format_float
from .stats import f_cdf, f_ppf, f_sf


@dataclass
class MetricPanel:
    r2: float
    rmse: float
    mae: float
    mape: float
    pearson: float
    mean_error: float
    n: int
    aicc: float | None = None

    def to_dict(self):
        return asdict(self)


def metric_panel(y, y_hat, aicc=None, warn=True):
    """R^2, RMSE, MAE, MAPE (as a fraction), Pearson r and mean error (y_hat - y).

    ``warn=False`` silences the zero-target warning, for targets on a
    normalized scale where an exact zero is expected.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ShapeError(f"y and y_hat must be equal-length vectors, got {y.shape} and {y_hat.shape}")
    n = y.size
    if n < 2:
        raise DomainError("metric panel needs at least two observations")
    resid = y - y_hat
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else math.nan
    if np.any(y == 0):
        if warn:
            warnings.warn("zero target value; MAPE is undefined and reported as NaN", RuntimeWarning)
        mape = math.nan
    else:
        mape = float(np.mean(np.abs(resid / y)))
    sy, sh = y.std(), y_hat.std()
    if sy > 0 and sh > 0:
        pearson = float(np.mean((y - y.mean()) * (y_hat - y_hat.mean())) / (sy * sh))
        pearson = min(1.0, max(-1.0, pearson))
    else:
        pearson = math.nan
    return MetricPanel(
        r2=r2,
        rmse=math.sqrt(rss / n),
        mae=float(np.mean(np.abs(resid))),
        mape=mape,
        pearson=pearson,
        mean_error=float(np.mean(y_hat - y)),
        n=n,
        aicc=aicc,
    )


def aicc(n, sigma2_hat, trace_S):
    """n ln(sigma^2) + n ln(2 pi) + n (n + tr S) / (n - 2 - tr S)."""
    denom = n - 2 - trace_S
    if not denom > 0:
        raise AICcUndefinedError(f"AICc undefined: n - 2 - tr(S) = {denom} <= 0")
    if not sigma2_hat > 0:
        raise AICcUndefinedError("AICc undefined for zero residual variance")
    return n * math.log(sigma2_hat) + n * math.log(2 * math.pi) + n * (n + trace_S) / denom


def f_distribution_cdf(x, df1, df2):
    return f_cdf(x, df1, df2)


def residual_traces(S):
    """delta_1 = tr[(I-S)^T (I-S)], delta_2 = tr{[(I-S)^T (I-S)]^2}."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"hat matrix must be square, got {S.shape}")
    R = np.eye(S.shape[0]) - S
    M = R.T @ R
    # tr(M) is the squared Frobenius norm of I-S; M is symmetric so tr(M^2) = ||M||_F^2
    return float(np.sum(R * R)), float(np.sum(M * M))


@dataclass
class F1Result:
    f1: float
    delta1: float
    delta2: float
    df_num: float
    df_den: float
    p_value: float
    critical: float
    significant: bool
    alpha: float
    tail: str

    def to_dict(self):
        return asdict(self)


def f1_test(rss_model, S, rss_olr, n, p, alpha=0.05, tail="left"):
    """Whole-model non-stationarity test against the global OLR fit.

    With ``tail="left"`` (default) non-stationarity is declared when
    F1 < F_{1-alpha}(delta1^2/delta2, n-p-1), the lower alpha quantile:
    a model RSS far below the OLR RSS, per unit of residual degrees of
    freedom, makes F1 small. ``tail="right"`` flips to the upper-tail rule.
    """
    if rss_model < 0 or rss_olr < 0:
        raise DomainError("residual sums of squares must be non-negative")
    S = np.asarray(S, dtype=float)
    if S.shape != (n, n):
        raise ShapeError(f"hat matrix must be {n}x{n}, got {S.shape}")
    d1, d2 = residual_traces(S)
    if not (d1 > 0 and d2 > 0):
        raise DegenerateTestError("delta traces vanish (S equals the identity)")
    df_den = n - p - 1
    if df_den < 1:
        raise DomainError("need n - p - 1 >= 1")
    if rss_olr == 0:
        raise DegenerateTestError("OLR residual sum of squares is zero")
    df_num = d1 * d1 / d2
    f1 = (rss_model / d1) / (rss_olr / df_den)
    if tail == "left":
        p_value = f_cdf(f1, df_num, df_den)
        critical = f_ppf(alpha, df_num, df_den)
    elif tail == "right":
        p_value = f_sf(f1, df_num, df_den)
        critical = f_ppf(1 - alpha, df_num, df_den)
    else:
        raise DomainError(f"tail must be 'left' or 'right', got {tail!r}")
    return F1Result(
        f1=f1,
        delta1=d1,
        delta2=d2,
        df_num=df_num,
        df_den=float(df_den),
        p_value=p_value,
        critical=critical,
        significant=bool(p_value < alpha),
        alpha=alpha,
        tail=tail,
    )


@dataclass
class F2Result:
    k: int
    name: str
    f2: float
    v_k2: float
    gamma1: float
    gamma2: float
    df_num: float
    df_den: float
    sigma2: float
    p_value: float
    significant: bool
    alpha: float

    def to_dict(self):
        return asdict(self)


def b_matrix(weights, XtX_inv_Xt, k):
    """B_k with row i = e_k^T W_i (X^T X)^{-1} X^T = w_k(i) * [(X^T X)^{-1} X^T]_k."""
    return np.outer(weights[:, k], XtX_inv_Xt[k])


def gamma_traces(weights, XtX_inv_Xt, k):
    """gamma_1k, gamma_2k for B_k without forming the n x n matrices.

    B_k = w a^T is rank one, so (1/n) B_k^T C B_k = (w^T C w / n) a a^T with
    C = I - J/n; its trace is (w^T C w / n) ||a||^2 and tr(M^2) = tr(M)^2.
    """
    w = weights[:, k]
    a = XtX_inv_Xt[k]
    n = w.size
    wc = w - w.mean()
    g1 = float(wc @ wc) / n * float(a @ a)
    return g1, g1 * g1


def f2_test(model, ds_train, k, alpha=0.05, S=None):
    """Per-variable test of whether the spatial weight of variable k is constant.

    ``model`` is a trained GNNWR model; ``k`` indexes the coefficient vector
    (0 is the intercept). ``S`` may be passed to reuse a computed hat matrix.
    """
    p = ds_train.p
    if not 0 <= k <= p:
        raise DomainError(f"variable index must lie in 0..{p}, got {k}")
    weights = model.training_weights(ds_train)
    A = model.olr_projector(ds_train)
    beta_eff = weights[:, k] * model.olr_beta[k]
    n = ds_train.n
    v_k2 = float(np.mean((beta_eff - beta_eff.mean()) ** 2))
    if S is None:
        S = model.hat_matrix(ds_train)
    d1, d2 = residual_traces(S)
    resid = ds_train.y - S @ ds_train.y
    sigma2 = float(resid @ resid) / d1
    g1, g2 = gamma_traces(weights, A, k)
    name = "intercept" if k == 0 else ds_train.names[k - 1]
    tiny = 1e-300
    if np.ptp(weights[:, k]) == 0 or (v_k2 <= tiny and g1 <= tiny):
        # Weight is constant over the points: nothing varies, never reject.
        # (The mean of identical floats can round, so v_k2 alone is unreliable.)
        v_k2 = 0.0
        return F2Result(k, name, 0.0, v_k2, g1, g2, math.nan, d1 * d1 / d2, sigma2, 1.0, False, alpha)
    if g1 <= tiny:
        raise DegenerateTestError(f"gamma_1 vanishes for variable {name}")
    if not sigma2 > 0:
        raise DegenerateTestError("model residual variance is zero")
    df_num = g1 * g1 / g2
    df_den = d1 * d1 / d2
    f2 = (v_k2 / g1) / sigma2
    p_value = f_sf(f2, df_num, df_den)
    return F2Result(k, name, f2, v_k2, g1, g2, df_num, df_den, sigma2, p_value, bool(p_value < alpha), alpha)


def relative_errors(y, y_hat):
    y = np.asarray(y, dtype=float)
    return np.abs(y - np.asarray(y_hat, dtype=float)) / np.abs(y)


def ratio_curve(err_a, err_b, thresholds):
    """Counts of each model's errors below/above each threshold and their ratios.

    ``best`` is #(err_a < t) / #(err_b < t); ``worst`` is #(err_b > t) / #(err_a > t),
    so values above 1 favour model a in both curves. Empty denominators give NaN.
    """
    err_a = np.sort(np.asarray(err_a, dtype=float))
    err_b = np.sort(np.asarray(err_b, dtype=float))
    t = np.asarray(thresholds, dtype=float)
    below_a = np.searchsorted(err_a, t, side="left")
    below_b = np.searchsorted(err_b, t, side="left")
    above_a = err_a.size - np.searchsorted(err_a, t, side="right")
    above_b = err_b.size - np.searchsorted(err_b, t, side="right")
    with np.errstate(divide="ignore", invalid="ignore"):
        best = np.where(below_b > 0, below_a / np.maximum(below_b, 1), np.nan)
        worst = np.where(above_a > 0, above_b / np.maximum(above_a, 1), np.nan)
    return {
        "threshold": t,
        "below_a": below_a,
        "below_b": below_b,
        "above_a": above_a,
        "above_b": above_b,
        "best_ratio": best,
        "worst_ratio": worst,
    }


def error_report(y, predictions, pair=None, bin_width=0.02, n_thresholds=101):
    """Relative-error summaries for several models' predictions of the same y.

    ``predictions`` maps model name to a prediction vector. ``pair`` picks the
    (a, b) models for the sorted Q-Q pairs and the ratio curve; it defaults to
    the first two names.
    """
    y = np.asarray(y, dtype=float)
    if not predictions:
        raise ReportError("no predictions supplied")
    errs = {}
    for name, yh in predictions.items():
        yh = np.asarray(yh, dtype=float)
        if yh.shape != y.shape:
            raise ShapeError(f"predictions for {name} not aligned with y")
        errs[name] = relative_errors(y, yh)
    top = max(float(np.max(e)) for e in errs.values())
    edges = np.arange(0.0, top + bin_width, bin_width)
    if edges.size < 2:
        edges = np.array([0.0, bin_width])
    hist = {name: np.histogram(e, bins=edges)[0] for name, e in errs.items()}
    report = {"relative_errors": errs, "bin_edges": edges, "histogram": hist}
    names = list(predictions)
    if pair is None:
        if len(names) < 2:
            raise ReportError("ratio curve needs predictions from at least two models")
        pair = (names[0], names[1])
    a, b = pair
    if a not in errs or b not in errs:
        raise ReportError(f"unknown models in pair {pair}")
    report["pair"] = (a, b)
    report["sorted_pairs"] = np.column_stack([np.sort(errs[a]), np.sort(errs[b])])
    thresholds = np.linspace(0.0, top, n_thresholds)
    report["ratio_curve"] = ratio_curve(errs[a], errs[b], thresholds)
    return report


def _csv(path, header, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([v if isinstance(v, (int, np.integer)) else format_float(v) for v in row])


def write_error_report(report, directory):
    """``errors_sorted.csv``, ``errors_histogram.csv`` and ``errors_ratio.csv``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    a, b = report["pair"]
    pairs = report["sorted_pairs"]
    _csv(out / "errors_sorted.csv", ["rank", a, b], [range(pairs.shape[0]), pairs[:, 0], pairs[:, 1]])
    edges = report["bin_edges"]
    names = list(report["histogram"])
    _csv(
        out / "errors_histogram.csv",
        ["bin_lo", "bin_hi", *names],
        [edges[:-1], edges[1:], *(report["histogram"][m].tolist() for m in names)],
    )
    c = report["ratio_curve"]
    keys = ["threshold", "below_a", "below_b", "above_a", "above_b", "best_ratio", "worst_ratio"]
    _csv(out / "errors_ratio.csv", keys, [c[k].tolist() for k in keys])
