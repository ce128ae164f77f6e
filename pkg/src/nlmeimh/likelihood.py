"""Individual log densities and their derivatives on the transformed scale.

Gradients come from a forward dual-number sweep through the structural or
hazard model; Hessians are central differences of those gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import dual as ad
from .errors import DomainError, EvaluationError
from .model import (LOG2PI, IndividualData, PopulationModel, Theta, log_abs_jacobian,
                    prior_grad, prior_logpdf, prior_mean, transform_backward,
                    transform_forward)

FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)


@dataclass(frozen=True)
class LogDensityEval:
    value: float
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ErrorModel:
    """Residual error model ``y = f + g * e``.

    ``params`` is ``(sigma,)`` for ``constant``, ``(b,)`` for ``proportional``
    (g = b f) and ``(a, b)`` for ``combined`` (g = a + b f).
    """

    kind: str = "constant"
    params: tuple = (1.0,)

    def __post_init__(self):
        n = {"constant": 1, "proportional": 1, "combined": 2}.get(self.kind)
        if n is None:
            raise DomainError(f"unknown error model {self.kind!r}")
        params = tuple(float(x) for x in self.params)
        if len(params) != n:
            raise DomainError(f"{self.kind} error model takes {n} parameter(s)")
        if any(x < 0 for x in params) or sum(params) <= 0:
            raise DomainError(f"{self.kind} error parameters must be >= 0 with a positive sum")
        object.__setattr__(self, "params", params)

    @classmethod
    def constant(cls, sigma2: float) -> "ErrorModel":
        if sigma2 <= 0:
            raise DomainError("sigma2 must be positive")
        return cls("constant", (math.sqrt(sigma2),))

    @property
    def sigma2(self) -> float:
        if self.kind != "constant":
            raise AttributeError("sigma2 is only defined for the constant error model")
        return self.params[0] ** 2

    def sd(self, f):
        """Predicted residual standard deviation ``g`` at predictions ``f``."""
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "proportional":
            return self.params[0] * f
        a, b = self.params
        return a + b * f

    def components(self) -> dict:
        if self.kind == "constant":
            return {"sigma2": self.sigma2}
        if self.kind == "proportional":
            return {"b": self.params[0]}
        return {"a": self.params[0], "b": self.params[1]}


def _check_finite(x, what):
    if isinstance(x, float):
        if not math.isfinite(x):
            raise EvaluationError(f"{what} is not finite", index=0)
        return
    v = np.atleast_1d(ad.value(x))
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise EvaluationError(f"{what} is not finite at observation {bad[0]}", index=int(bad[0]))


def cont_loglik(phi, individual: IndividualData, structural, error: ErrorModel,
                transforms=None):
    """Gaussian log-likelihood ``log p(y_i | phi_i)`` of continuous observations."""
    psi = transform_backward(phi, transforms)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        f = structural(individual.times, psi, individual.dose)
    _check_finite(f, f"structural model {getattr(structural, 'name', '')}")
    with np.errstate(over="ignore", invalid="ignore"):
        return _gauss_loglik(individual.values, f, error)


def _gauss_loglik(y, f, error):
    g = error.sd(f)
    resid = y - f
    if error.kind == "constant":
        var = g * g
        n = y.size
        return -0.5 * n * (LOG2PI + math.log(var)) - 0.5 * ad.sum(resid * resid) / var
    gv = np.atleast_1d(ad.value(g))
    bad = np.flatnonzero(gv <= 0)
    if bad.size:
        raise EvaluationError(f"residual sd is not positive at observation {bad[0]}",
                              index=int(bad[0]))
    var = g * g
    return -0.5 * ad.sum(LOG2PI + ad.log(var) + resid * resid / var)


def adaptive_simpson(fun, a, b, tol=1e-10, max_depth=50):
    """Adaptive Simpson quadrature of ``fun`` on ``[a, b]`` (dual-aware)."""

    def simpson(fa, fm, fb, h):
        return (fa + 4.0 * fm + fb) * (h / 6.0)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = fun(lm), fun(rm)
        left = simpson(fa, flm, fm, m - a)
        right = simpson(fm, frm, fb, b - m)
        delta = left + right - whole
        err = abs(float(ad.value(delta)))
        if not math.isfinite(err):
            raise EvaluationError("integrand is not finite")
        if depth <= 0 or err <= 15.0 * tol:
            return left + right + delta * (1.0 / 15.0)
        return (recurse(a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(m, b, fm, frm, fb, right, 0.5 * tol, depth - 1))

    if b <= a:
        return 0.0
    fa, fm, fb = fun(a), fun(0.5 * (a + b)), fun(b)
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, max_depth)


def cumulative_hazard(hazard, t, psi):
    """Closed form when the hazard model declares one, else adaptive Simpson."""
    if hazard.cumulative is not None:
        return hazard.cumulative(t, psi)
    return adaptive_simpson(lambda u: hazard.hazard(u, psi), 0.0, float(t), tol=1e-10)


def tte_loglik(phi, individual: IndividualData, hazard, transforms=None):
    """Event-time log-likelihood: ``-H(tau_c) + sum_j log h(t_j)``."""
    psi = transform_backward(phi, transforms)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        total = -cumulative_hazard(hazard, individual.tau_c, psi)
        ev = individual.event_times
        if ev.size:
            if hazard.log_hazard is not None:
                logh = hazard.log_hazard(ev, psi)
            else:
                h = hazard.hazard(ev, psi)
                hv = np.atleast_1d(ad.value(h))
                bad = np.flatnonzero(~(hv > 0))
                if bad.size:
                    raise EvaluationError(f"hazard is not positive at event {bad[0]}",
                                          index=int(bad[0]))
                logh = ad.log(h)
            total = total + ad.sum(logh)
    _check_finite(total, "time-to-event log-likelihood")
    return total


@dataclass(frozen=True)
class ContinuousModel:
    """Continuous observations around a structural model."""

    structural: Callable
    kind = "continuous"

    @property
    def p(self):
        return self.structural.p

    def loglik(self, phi, individual, theta: Theta):
        return cont_loglik(phi, individual, self.structural, theta.error,
                           theta.population.transforms)


@dataclass(frozen=True)
class TimeToEventModel:
    """(Repeated) time-to-event observations with a parametric hazard."""

    hazard: object
    kind = "tte"

    @property
    def p(self):
        return self.hazard.p

    def loglik(self, phi, individual, theta: Theta):
        return tte_loglik(phi, individual, self.hazard, theta.population.transforms)


class Target:
    """Unnormalized conditional density ``log p(y|phi) + log p(phi)``.

    Subclasses provide :meth:`loglik`, which must accept plain arrays and
    :class:`~nlmeimh.dual.Dual` vectors.
    """

    individual = None

    def __init__(self, population: PopulationModel, mean=None):
        self.population = population
        self.p = population.p
        self.mean = prior_mean(self.individual, population) if mean is None else np.asarray(mean, float)

    def loglik(self, phi):
        raise NotImplementedError

    def logprior(self, phi):
        return float(prior_logpdf(phi, None, self.population, mean=self.mean))

    def grad_logprior(self, phi):
        return prior_grad(phi, None, self.population, mean=self.mean)

    def logpdf(self, phi) -> float:
        return float(ad.value(self.loglik(phi))) + self.logprior(phi)

    def safe_loglik(self, phi) -> float:
        """Log-likelihood, or ``-inf`` where the model cannot be evaluated."""
        try:
            v = float(ad.value(self.loglik(phi)))
        except (EvaluationError, DomainError, FloatingPointError, OverflowError):
            return -math.inf
        return v if v == v else -math.inf

    def safe_logpdf(self, phi) -> float:
        ll = self.safe_loglik(phi)
        return ll if ll == -math.inf else ll + self.logprior(phi)

    def loglik_and_grad(self, phi):
        d = self.loglik(ad.Dual.variables(phi))
        if not isinstance(d, ad.Dual):  # data carry no information on phi
            return float(d), np.zeros(self.p)
        return float(d.val), d.der.reshape(self.p).copy()

    def value_and_grad(self, phi):
        ll, g = self.loglik_and_grad(phi)
        return ll + self.logprior(phi), g + self.grad_logprior(phi)

    def grad(self, phi) -> np.ndarray:
        return self.value_and_grad(phi)[1]

    def hessian(self, phi, loglik_only=False) -> np.ndarray:
        """Central differences of the dual-number gradient, symmetrized."""
        phi = np.asarray(phi, dtype=float)
        gfun = (lambda x: self.loglik_and_grad(x)[1]) if loglik_only else self.grad
        H = np.empty((self.p, self.p))
        for j in range(self.p):
            h = FD_STEP * max(1.0, abs(phi[j]))
            up, dn = phi.copy(), phi.copy()
            up[j] += h
            dn[j] -= h
            H[:, j] = (gfun(up) - gfun(dn)) / (up[j] - dn[j])
        return 0.5 * (H + H.T)


class ConditionalTarget(Target):
    """Conditional density of one individual's parameters under ``theta``."""

    def __init__(self, individual: IndividualData, model, theta: Theta):
        self.individual = individual
        self.model = model
        self.theta = theta
        super().__init__(theta.population)

    def loglik(self, phi):
        return self.model.loglik(phi, self.individual, self.theta)


class LogDensityTarget(Target):
    """Target built from an arbitrary (dual-aware) log-likelihood function."""

    def __init__(self, loglik_fn, population: PopulationModel, mean=None):
        self._fn = loglik_fn
        super().__init__(population, mean=np.asarray(population.phi_pop if mean is None else mean))

    def loglik(self, phi):
        return self._fn(phi)


def joint_logpdf(phi, individual, obs_model, theta: Theta) -> float:
    """``log p(y_i, phi_i)``: conditional log-likelihood plus prior log density."""
    ll = float(ad.value(obs_model.loglik(np.asarray(phi, float), individual, theta)))
    return ll + float(prior_logpdf(phi, individual, theta.population))


def joint_logpdf_psi(psi, individual, obs_model, theta: Theta) -> float:
    """Joint density reported on the natural ``psi`` scale (adds the transform Jacobian)."""
    pop = theta.population
    phi = transform_forward(psi, pop)
    return joint_logpdf(phi, individual, obs_model, theta) + float(log_abs_jacobian(psi, pop))


def grad_joint(phi, individual, obs_model, theta: Theta) -> LogDensityEval:
    target = ConditionalTarget(individual, obs_model, theta)
    v, g = target.value_and_grad(np.asarray(phi, float))
    return LogDensityEval(v, g)


def hess_joint(phi, individual, obs_model, theta: Theta) -> LogDensityEval:
    target = ConditionalTarget(individual, obs_model, theta)
    phi = np.asarray(phi, float)
    v, g = target.value_and_grad(phi)
    return LogDensityEval(v, g, target.hessian(phi))
