"""Chain mixing diagnostics and Monte Carlo convergence curves."""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


def _samples(trace) -> np.ndarray:
    x = getattr(trace, "samples", trace)
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def msjd(trace) -> np.ndarray:
    """Mean squared jump distance per coordinate, rejections included."""
    x = _samples(trace)
    if x.shape[0] < 2:
        raise DomainError("MSJD needs at least two samples")
    return np.mean(np.diff(x, axis=0) ** 2, axis=0)


def acf(x, max_lag=None) -> np.ndarray:
    """Empirical autocorrelations of the columns of ``x`` for lags ``0..max_lag``.

    Uses the biased (divide-by-n) autocovariance, computed by FFT.  Constant
    columns get ``acf[0] = 1`` and zeros elsewhere.
    """
    x = _samples(x)
    n = x.shape[0]
    max_lag = n - 1 if max_lag is None else min(int(max_lag), n - 1)
    xc = x - x.mean(axis=0)
    size = 1 << int(2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=0)
    cov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[: max_lag + 1] / n
    var = cov[0].copy()
    out = np.zeros_like(cov)
    ok = var > 1e-300 * max(1.0, float(np.max(np.abs(x)) ** 2))
    out[:, ok] = cov[:, ok] / var[ok]
    out[0] = 1.0
    return out


@dataclass
class EssResult:
    ess: np.ndarray
    degenerate: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.ess, dtype=dtype)


def ess(trace, min_length=100) -> EssResult:
    """Effective sample size with Geyer's initial positive sequence.

    ``n / (1 + 2 sum rho_l)``, summing consecutive autocorrelation pairs while
    the pair sums stay positive.  Capped at ``n``; a zero-variance coordinate
    reports ``n`` and is flagged in ``degenerate``.
    """
    x = _samples(trace)
    n, p = x.shape
    if n < min_length:
        raise DomainError(f"ESS needs at least {min_length} samples, got {n}")
    rho = acf(x)
    degenerate = np.ptp(x, axis=0) == 0
    out = np.empty(p)
    for j in range(p):
        if degenerate[j]:
            out[j] = n
            continue
        r = rho[:, j]
        m = (len(r) - 1) // 2
        pairs = r[0: 2 * m: 2] + r[1: 2 * m + 1: 2]
        neg = np.flatnonzero(pairs <= 0)
        k = neg[0] if neg.size else pairs.size
        tau = -1.0 + 2.0 * pairs[:k].sum()
        out[j] = n / tau if tau > 0 else n
    return EssResult(np.minimum(out, n), degenerate)


def running_median(trace, coordinate=0) -> np.ndarray:
    """Median of the first ``k`` samples for every ``k``; two-heap order statistics."""
    x = _samples(trace)[:, coordinate]
    if x.size == 0:
        return np.zeros(0)
    lo, hi = [], []  # max-heap (negated), min-heap
    out = np.empty(x.size)
    for k, v in enumerate(x):
        if lo and v > -lo[0]:
            heapq.heappush(hi, v)
        else:
            heapq.heappush(lo, -v)
        if len(lo) > len(hi) + 1:
            heapq.heappush(hi, -heapq.heappop(lo))
        elif len(hi) > len(lo):
            heapq.heappush(lo, -heapq.heappop(hi))
        out[k] = -lo[0] if len(lo) > len(hi) else 0.5 * (hi[0] - lo[0])
    return out


def _component(trace, component):
    if isinstance(trace, np.ndarray) or isinstance(trace, (list, tuple)):
        return np.asarray(trace, float)
    return np.asarray(trace.component(component), float)


def mean_square_distance(traces, component=None) -> np.ndarray:
    """``E_k = mean_m (theta_k^(m) - theta_K^(m))^2`` over replicate traces."""
    rows = [_component(t, component) for t in traces]
    if not rows:
        raise DomainError("no traces given")
    if len({r.shape for r in rows}) != 1:
        raise DomainError("all traces must have the same length")
    a = np.stack(rows)
    if a.shape[1] == 0:
        return np.zeros(0)
    return np.mean((a - a[:, -1:]) ** 2, axis=0)


@dataclass
class ChainSummary:
    msjd: np.ndarray
    ess: np.ndarray
    acf: np.ndarray
    acceptance_rate: float
    running_median: np.ndarray
    degenerate: np.ndarray = field(default=None)


def summarize(trace, max_lag=100) -> ChainSummary:
    """All diagnostics of one chain trace (coordinates on the phi scale)."""
    x = _samples(trace)
    e = ess(x, min_length=min(100, x.shape[0]))
    med = np.column_stack([running_median(x, j) for j in range(x.shape[1])])
    acc = getattr(trace, "acceptance_rate", float("nan"))
    return ChainSummary(msjd(x), e.ess, acf(x, max_lag), acc, med, e.degenerate)


def write_summary_csv(path, summary: ChainSummary, names=None):
    """``coordinate,msjd,ess,acceptance_rate``, one row per coordinate."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coordinate", "msjd", "ess", "acceptance_rate"])
        for j in range(len(summary.msjd)):
            coord = names[j] if names else f"phi_{j + 1}"
            w.writerow([coord, repr(float(summary.msjd[j])), repr(float(summary.ess[j])),
                        repr(float(summary.acceptance_rate))])


def write_acf_csv(path, summary: ChainSummary, names=None):
    """``lag,coordinate,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "coordinate", "value"])
        for lag in range(summary.acf.shape[0]):
            for j in range(summary.acf.shape[1]):
                coord = names[j] if names else f"phi_{j + 1}"
                w.writerow([lag, coord, repr(float(summary.acf[lag, j]))])


def write_ek_csv(path, curves: dict):
    """``iter,component,value`` from ``{component: E_k array}``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "component", "value"])
        for name, e in curves.items():
            for k, v in enumerate(e):
                w.writerow([k + 1, name, repr(float(v))])
