"""Poisson tail kernels used by the censored-data E-step.

Everything here works on numpy arrays (broadcasting ``lam`` against ``k``)
and returns a Python float when all inputs are scalars.

Tail probabilities go through the regularized lower incomplete gamma
function, ``Pr(N >= a) = P(a, lam)`` for integer ``a``. ``P`` is evaluated in
log space with the power series when ``lam < a + 1`` and with the
continued fraction for the complement otherwise, so photon counts in the
10^5 range neither overflow nor underflow.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

__all__ = [
    "DomainError",
    "poisson_logpmf",
    "poisson_sf_log",
    "truncated_poisson_mean",
    "binomial_split_mean",
]

_EPS = np.finfo(float).eps
_TINY = np.finfo(float).tiny / _EPS
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# Stirling series coefficients for lgamma(n + 1) - stirling(n)
_S0 = 1.0 / 12.0
_S1 = 1.0 / 360.0
_S2 = 1.0 / 1260.0
_S3 = 1.0 / 1680.0
_S4 = 1.0 / 1188.0


class DomainError(ValueError):
    """Argument outside the domain of a distribution kernel."""


def _as_float(out):
    return float(out) if np.ndim(out) == 0 else out


def _stirlerr(n):
    """log(n!) - [(n + 1/2) log n - n + log(sqrt(2 pi))] for n > 0."""
    n = np.asarray(n, dtype=float)
    out = np.empty_like(n)
    small = n <= 15.0
    ns = n[small]
    out[small] = gammaln(ns + 1.0) - (ns + 0.5) * np.log(ns) + ns - _HALF_LOG_2PI
    nl = n[~small]
    nn = nl * nl
    out[~small] = (_S0 - (_S1 - (_S2 - (_S3 - _S4 / nn) / nn) / nn) / nn) / nl
    return out


def _bd0(x, m):
    """Deviance term x log(x/m) + m - x, accurate when x is close to m."""
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    out = np.empty_like(x)
    close = np.abs(x - m) < 0.1 * (x + m)
    xc, mc = x[close], m[close]
    v = (xc - mc) / (xc + mc)
    s = (xc - mc) * v
    ej = 2.0 * xc * v
    v2 = v * v
    active = np.ones(s.shape, dtype=bool)
    for j in range(1, 1000):
        if not active.any():
            break
        ej = ej * v2
        s1 = s + ej / (2 * j + 1)
        active = s1 != s
        s = s1
    out[close] = s
    xf, mf = x[~close], m[~close]
    out[~close] = xf * np.log(xf / mf) + mf - xf
    return out


def poisson_logpmf(n, lam):
    """Log Poisson probability ``log Pr(N = n)`` with saddle-point accuracy.

    ``n`` must be a nonnegative integer (array); ``lam`` nonnegative.
    """
    n, lam = np.broadcast_arrays(np.asarray(n, dtype=float), np.asarray(lam, dtype=float))
    out = np.empty(n.shape, dtype=float)
    zero_lam = lam == 0.0
    out[zero_lam] = np.where(n[zero_lam] == 0.0, 0.0, -np.inf)
    zero_n = (n == 0.0) & ~zero_lam
    out[zero_n] = -lam[zero_n]
    rest = ~(zero_lam | zero_n)
    nr, lr = n[rest], lam[rest]
    out[rest] = -_stirlerr(nr) - _bd0(nr, lr) - _HALF_LOG_2PI - 0.5 * np.log(nr)
    return _as_float(out)


def _max_terms(a):
    return int(20.0 * np.sqrt(max(float(np.max(a, initial=1.0)), 1.0))) + 200


def _series_sum(a, x):
    """S(a, x) = sum_{n>=0} x^n / ((a+1)...(a+n)); P(a, x) = pmf(a; x) * S."""
    total = np.ones_like(x)
    term = np.ones_like(x)
    active = np.arange(x.size)
    limit = _max_terms(a)
    n = 0
    while active.size:
        n += 1
        if n > limit:
            raise ArithmeticError("incomplete gamma series failed to converge")
        term[active] *= x[active] / (a[active] + n)
        total[active] += term[active]
        active = active[term[active] >= _EPS * total[active]]
    return total


def _log_upper_cf(a, x):
    """log Q(a, x) via the modified Lentz continued fraction (x >= a + 1)."""
    b = x + 1.0 - a
    c = np.full_like(x, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.arange(x.size)
    limit = _max_terms(a)
    i = 0
    while active.size:
        i += 1
        if i > limit:
            raise ArithmeticError("incomplete gamma continued fraction failed to converge")
        an = -i * (i - a[active])
        b[active] += 2.0
        dd = an * d[active] + b[active]
        dd[np.abs(dd) < _TINY] = _TINY
        cc = b[active] + an / c[active]
        cc[np.abs(cc) < _TINY] = _TINY
        dd = 1.0 / dd
        delta = dd * cc
        d[active] = dd
        c[active] = cc
        h[active] *= delta
        active = active[np.abs(delta - 1.0) >= _EPS]
    return -x + a * np.log(x) - gammaln(a) + np.log(h)


def _tail_parts(a, x):
    """Return (log P(a, x), pmf(a; x) / P(a, x)) for integer a >= 1, x > 0."""
    log_pmf = np.atleast_1d(poisson_logpmf(a, x))
    log_p = np.empty_like(x)
    hazard = np.empty_like(x)
    series = x < a + 1.0
    if series.any():
        total = _series_sum(a[series], x[series])
        log_p[series] = log_pmf[series] + np.log(total)
        hazard[series] = 1.0 / total
    cf = ~series
    if cf.any():
        log_q = _log_upper_cf(a[cf], x[cf])
        log_p[cf] = np.log1p(-np.exp(log_q))
        hazard[cf] = np.exp(log_pmf[cf] - log_p[cf])
    return log_p, hazard


def _check_args(lam, k):
    lam = np.asarray(lam, dtype=float)
    k = np.asarray(k)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise DomainError("Poisson rate must be finite and nonnegative")
    if np.any(k < -1) or np.any(np.asarray(k, dtype=float) != np.floor(k)):
        raise DomainError("truncation index must be an integer >= -1")
    lam, k = np.broadcast_arrays(lam, k.astype(float))
    return lam.ravel().copy(), k.ravel().copy(), lam.shape


def poisson_sf_log(lam, k):
    """Log of the right tail ``Pr(N >= k + 1)`` for ``N ~ Poisson(lam)``.

    Returns 0 for ``k = -1`` and ``-inf`` when ``lam = 0`` and ``k >= 0``.
    """
    lam, k, shape = _check_args(lam, k)
    out = np.zeros_like(lam)
    a = k + 1.0
    out[(a > 0) & (lam == 0.0)] = -np.inf
    sel = (a > 0) & (lam > 0.0)
    if sel.any():
        out[sel] = _tail_parts(a[sel], lam[sel])[0]
    return _as_float(out.reshape(shape))


def truncated_poisson_mean(lam, k):
    """Mean of a Poisson(lam) variable conditioned on exceeding ``k``.

    Computed as ``lam + (k + 1) pmf(k + 1) / Pr(N >= k + 1)``, which is the
    ratio ``lam Pr(N >= k) / Pr(N >= k + 1)`` rewritten so that the deep tail
    (``lam << k``) tends to ``k + 1`` instead of 0/0.

    Raises
    ------
    DomainError
        For negative arguments, or ``lam = 0`` with ``k >= 0``.
    """
    lam, k, shape = _check_args(lam, k)
    if np.any((lam == 0.0) & (k >= 0)):
        raise DomainError("truncated Poisson with zero rate is undefined")
    out = lam.copy()
    sel = k >= 0
    if sel.any():
        a = k[sel] + 1.0
        x = lam[sel]
        hazard = _tail_parts(a, x)[1]
        val = x + a * hazard
        # both tails underflowed: fall back to the analytic limit
        bad = ~np.isfinite(val)
        val[bad] = a[bad]
        out[sel] = np.maximum(val, np.maximum(x, a))
    return _as_float(out.reshape(shape))


def binomial_split_mean(signal_rate, background_rate, total_counts):
    """Expected signal share of ``total_counts`` under a two-source Poisson split.

    ``signal_rate / (signal_rate + background_rate) * total_counts``. Counts
    may be real valued (expected counts from the E-step).
    """
    s = np.asarray(signal_rate, dtype=float)
    b = np.asarray(background_rate, dtype=float)
    n = np.asarray(total_counts, dtype=float)
    if np.any(s < 0) or np.any(b < 0) or np.any(n < 0):
        raise DomainError("rates and counts must be nonnegative")
    total = s + b
    if np.any(total == 0):
        raise DomainError("signal and background rates are both zero")
    return _as_float(s / total * n)
