"""Bundled structural and hazard models, and synthetic data generators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import dual as ad
from .errors import EvaluationError
from .likelihood import ErrorModel, cumulative_hazard
from .model import IndividualData, Theta, sample_prior, transform_backward

KA_K_TOL = 1e-8


@dataclass(frozen=True)
class StructuralModel:
    """Prediction ``f(t, psi, dose)``; ``fn`` must accept dual-number ``psi``."""

    name: str
    names: tuple
    fn: Callable

    @property
    def p(self) -> int:
        return len(self.names)

    def __call__(self, t, psi, dose=0.0):
        return self.fn(np.asarray(t, dtype=float), psi, dose)


@dataclass(frozen=True)
class HazardModel:
    """Hazard ``h(t, psi)`` with optional closed-form cumulative hazard and inverse."""

    name: str
    names: tuple
    hazard: Callable
    cumulative: Optional[Callable] = None
    log_hazard: Optional[Callable] = None
    inverse_cumulative: Optional[Callable] = None

    @property
    def p(self) -> int:
        return len(self.names)


def pk1_oral(t, psi, dose):
    """One-compartment model, first-order absorption, single oral dose.

    ``psi = (ka, V, k)``.  Uses the nonnegative ordering
    ``D ka / (V (ka - k)) (exp(-k t) - exp(-ka t))``; for ``|ka - k| < 1e-8``
    the removable singularity is replaced by its limit evaluated at the
    midpoint rate, which keeps first derivatives exact across the branch.
    """
    ka, V, k = psi[0], psi[1], psi[2]
    t = np.asarray(t, dtype=float)
    diff = ka - k
    if abs(float(ad.value(diff))) < KA_K_TOL:
        kbar = 0.5 * (ka + k)
        return dose * ka * t * ad.exp(-kbar * t) / V
    return dose * ka / (V * diff) * (ad.exp(-k * t) - ad.exp(-ka * t))


PK1_ORAL = StructuralModel("pk1_oral", ("ka", "V", "k"), pk1_oral)


def linear_structural(basis: Callable, names: Sequence[str], name="linear") -> StructuralModel:
    """Model ``f = A(t) psi`` with design rows ``A(t) = basis(t)`` (shape n x p)."""

    def fn(t, psi, dose):
        return np.asarray(basis(t), dtype=float) @ psi

    return StructuralModel(name, tuple(names), fn)


def polynomial_basis(degree: int) -> Callable:
    return lambda t: np.vander(np.asarray(t, float), degree + 1, increasing=True)


def _zero_time_fix(t, psi, out, at_zero):
    """Patch hazard values at t == 0 where the power law is 0 * inf."""
    lam, beta = psi[0], psi[1]
    zero = t == 0
    if not np.any(zero):
        return out
    b = float(ad.value(beta))
    if b < 1:
        raise EvaluationError("Weibull hazard diverges at t = 0 for beta < 1",
                              index=int(np.flatnonzero(zero)[0]))
    fill = 1.0 / lam if b == 1 else 0.0 * lam
    if isinstance(out, ad.Dual):
        val, der = out.val.copy(), out.der.copy()
        val[zero] = ad.value(fill)
        der[zero] = fill.der if isinstance(fill, ad.Dual) else 0.0
        return ad.Dual(val, der)
    out = np.array(out, dtype=float)
    out[zero] = fill
    return out


def weibull_hazard(t, psi):
    """``h(t) = (beta / lam) (t / lam)^(beta - 1)`` with ``psi = (lam, beta)``."""
    lam, beta = psi[0], psi[1]
    t = np.asarray(t, dtype=float)
    safe = np.where(t == 0, 1.0, t)
    out = beta / lam * ad.exp((beta - 1.0) * (np.log(safe) - ad.log(lam)))
    return _zero_time_fix(t, psi, out, None)


def weibull_log_hazard(t, psi):
    lam, beta = psi[0], psi[1]
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        h = weibull_hazard(t, psi)
        if np.any(np.atleast_1d(ad.value(h)) <= 0):
            raise EvaluationError("Weibull hazard is zero at an event time")
        return ad.log(h)
    loglam = ad.log(lam)
    return ad.log(beta) - loglam + (beta - 1.0) * (np.log(t) - loglam)


def weibull_cumhaz(t, psi):
    """``H(t) = (t / lam)^beta``."""
    lam, beta = psi[0], psi[1]
    if np.isscalar(t) and not isinstance(lam, ad.Dual):
        return (t / lam) ** beta if t > 0 else 0.0
    t = np.asarray(t, dtype=float)
    if t.ndim == 0 and t == 0:
        return 0.0
    safe = np.where(t == 0, 1.0, t)
    out = ad.exp(beta * (np.log(safe) - ad.log(lam)))
    if np.any(t == 0):
        out = out * (t > 0)
    return out


def weibull_inverse_cumhaz(H, psi):
    lam, beta = float(psi[0]), float(psi[1])
    return lam * H ** (1.0 / beta)


WEIBULL = HazardModel("weibull", ("lambda", "beta"), weibull_hazard, weibull_cumhaz,
                      weibull_log_hazard, weibull_inverse_cumhaz)


# ---------------------------------------------------------------------------
# simulation


def simulate_continuous(theta: Theta, design, n: int, structural: StructuralModel,
                        error: Optional[ErrorModel] = None, rng=None, dose=0.0,
                        covariates=None, noise=True):
    """Draw ``phi_i`` from the population model and noisy predictions at ``design``.

    ``design`` is one time vector shared by every subject or a list of ``n``
    vectors; ``dose`` may be a scalar or per-subject sequence.
    """
    rng = np.random.default_rng() if rng is None else rng
    error = theta.error if error is None else error
    pop = theta.population
    if isinstance(design, np.ndarray) or (len(design) and np.isscalar(design[0])):
        design = [design] * n
    if len(design) != n:
        raise ValueError(f"design lists {len(design)} subjects, expected {n}")
    doses = np.broadcast_to(np.asarray(dose, dtype=float), (n,))
    data = []
    for i in range(n):
        cov = None if covariates is None else np.asarray(covariates[i], float)
        stub = IndividualData(i + 1, times=[0.0], values=[0.0], covariates=cov)
        phi = sample_prior(stub, pop, rng)
        psi = transform_backward(phi, pop)
        t = np.asarray(design[i], dtype=float)
        f = np.asarray(structural(t, psi, doses[i]), dtype=float)
        if noise and error is not None:
            y = f + np.asarray(error.sd(f), float) * rng.standard_normal(t.size)
        else:
            y = f.copy()
        data.append(IndividualData(i + 1, times=t, values=y, dose=float(doses[i]),
                                   covariates=cov))
    return data


def _bisect_event_time(hazard, psi, t_lo, target, t_hi, tol=1e-10):
    lo, hi = t_lo, t_hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if float(cumulative_hazard(hazard, mid, psi)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_event_times(hazard: HazardModel, psi, tau_c: float, rng) -> np.ndarray:
    """Sequential inverse-CDF sampling of repeated events up to ``tau_c``.

    Each gap solves ``H(t_prev + G) - H(t_prev) = E`` with ``E ~ Exp(1)``.
    """
    h_end = float(cumulative_hazard(hazard, tau_c, psi))
    events = []
    t_prev, h_prev = 0.0, 0.0
    while True:
        target = h_prev + rng.standard_exponential()
        if target > h_end:
            break
        if hazard.inverse_cumulative is not None:
            t = float(hazard.inverse_cumulative(target, psi))
        else:
            t = _bisect_event_time(hazard, psi, t_prev, target, tau_c)
        if t <= t_prev:  # vanishing gap from rounding
            t = math.nextafter(t_prev, math.inf)
        events.append(t)
        t_prev, h_prev = t, target
    return np.array(events)


def simulate_tte(theta: Theta, n: int, hazard: HazardModel, tau_c: float, rng=None,
                 covariates=None):
    """Repeated time-to-event data with right censoring at ``tau_c``."""
    rng = np.random.default_rng() if rng is None else rng
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    pop = theta.population
    data = []
    for i in range(n):
        cov = None if covariates is None else np.asarray(covariates[i], float)
        stub = IndividualData(i + 1, tau_c=tau_c, covariates=cov)
        phi = sample_prior(stub, pop, rng)
        psi = transform_backward(phi, pop)
        ev = sample_event_times(hazard, psi, tau_c, rng)
        data.append(IndividualData(i + 1, event_times=ev, tau_c=tau_c, covariates=cov))
    return data
