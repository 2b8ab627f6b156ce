"""Reference implementations written independently of the package code."""
import statistics

import mpmath
import numpy as np
from scipy import stats

mpmath.mp.dps = 40


def phi_quad(x):
    """Standard normal CDF by numerical integration of the density."""
    pdf = lambda t: mpmath.exp(-t * t / 2) / mpmath.sqrt(2 * mpmath.pi)  # noqa: E731
    return float(mpmath.quad(pdf, [-mpmath.inf, x]))


def pdf(x):
    return float(mpmath.npdf(x))


def pe_ind(mu0, mu1, sigma):
    return float(mpmath.fsum(mpmath.ncdf(-(b - a) / (2 * sigma)) for a, b in zip(mu0, mu1)) / len(mu0))


def pe_com(mu0, mu1, u0, u1, sigma):
    T = mpmath.mpf(u0 + u1) / 2
    terms = [1 - mpmath.ncdf((T - a) / sigma) + mpmath.ncdf((T - b) / sigma) for a, b in zip(mu0, mu1)]
    return float(mpmath.fsum(terms) / (2 * len(mu0)))


def auc_pairs(pos, neg):
    """O(n^2) Mann-Whitney pair counting; ties count one half."""
    pos = np.asarray(pos, dtype=np.float64)[:, None]
    neg = np.asarray(neg, dtype=np.float64)[None, :]
    wins = int(np.sum(pos > neg))
    ties = int(np.sum(pos == neg))
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def summary(values, trim_total=0.10):
    v = [float(x) for x in values]
    q = statistics.quantiles(v, n=4, method="inclusive")  # type-7 quartiles
    return {
        "mean": statistics.fmean(v),
        "sd": statistics.stdev(v),
        "median": statistics.median(v),
        "iqr": q[2] - q[0],
        "trimmed_mean": float(stats.trim_mean(v, trim_total / 2)),
    }


def central_diff(f, x, eps=1e-6):
    """Gradient of scalar f at x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        g[i] = (f(hi) - f(lo)) / (2 * eps)
    return g
