"""Distribution functions built on the regularized incomplete beta function.

Only what the regression tests need: the F CDF/survival/quantile and the
two-sided Student t p-value. Degrees of freedom may be non-integer.
"""

import math

from scipy.optimize import brentq

from .errors import DomainError

_EPS = 1e-16
_FPMIN = 1e-300
_MAXIT = 100_000


def _betacf(a, b, x, y):
    # Modified Lentz evaluation of the continued fraction for I_x(a, b).
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _front(a, b, x, y):
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(y)
    )
    return math.exp(log_front)


def betainc_pair(a, b, x, y=None):
    """Return ``(I_x(a, b), 1 - I_x(a, b))``, each computed without cancellation.

    ``y`` is ``1 - x``; pass it when it is known more accurately than the
    rounded difference.
    """
    if a <= 0 or b <= 0 or not math.isfinite(a) or not math.isfinite(b):
        raise DomainError(f"beta parameters must be positive and finite, got a={a}, b={b}")
    if y is None:
        y = 1.0 - x
    if x < 0 or y < 0:
        raise DomainError(f"x must lie in [0, 1], got {x}")
    if x == 0:
        return 0.0, 1.0
    if y == 0:
        return 1.0, 0.0
    if x < (a + 1.0) / (a + b + 2.0):
        # Below the mean the lower tail is never close to 1, so 1 - lower
        # keeps full relative accuracy; symmetrically above.
        lower = _front(a, b, x, y) * _betacf(a, b, x, y) / a
        return lower, 1.0 - lower
    upper = _front(a, b, x, y) * _betacf(b, a, y, x) / b
    return 1.0 - upper, upper


def betainc(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    return betainc_pair(a, b, x)[0]


def _check_f(x, df1, df2):
    for name, df in (("df1", df1), ("df2", df2)):
        if not (df > 0) or math.isnan(df):
            raise DomainError(f"{name} must be positive, got {df}")
    if math.isnan(x):
        raise DomainError("x is NaN")


def _f_pair(x, df1, df2):
    if x <= 0:
        return 0.0, 1.0
    if math.isinf(x):
        return 1.0, 0.0
    if math.isinf(df2):
        raise DomainError("df2 must be finite")
    num = df1 * x
    den = num + df2
    return betainc_pair(df1 / 2.0, df2 / 2.0, num / den, df2 / den)


def f_cdf(x, df1, df2):
    """P(F <= x) for F ~ F(df1, df2)."""
    _check_f(x, df1, df2)
    return _f_pair(x, df1, df2)[0]


def f_sf(x, df1, df2):
    """P(F > x), accurate in the upper tail."""
    _check_f(x, df1, df2)
    return _f_pair(x, df1, df2)[1]


def f_ppf(q, df1, df2):
    """Quantile of F(df1, df2): the x with f_cdf(x) = q."""
    _check_f(1.0, df1, df2)
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"probability must lie in [0, 1], got {q}")
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return math.inf
    hi = 1.0
    while f_cdf(hi, df1, df2) < q:
        hi *= 2.0
    lo = 0.0
    return brentq(lambda v: f_cdf(v, df1, df2) - q, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)


def t_two_sided_p(t, df):
    """Two-sided p-value of a Student t statistic with ``df`` degrees of freedom."""
    if not (df > 0):
        raise DomainError(f"df must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    return betainc_pair(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))[0]
