"""Hierarchical population model: transforms, covariates and the parameter vector.

Individual parameters are handled on the transformed (Gaussian) scale
``phi = u(psi)``; natural-scale ``psi`` is only a presentation view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from scipy import linalg, special

from . import dual as ad
from .errors import ConfigError, DomainError

TRANSFORMS = ("identity", "log", "logit", "probit")
LOG2PI = math.log(2.0 * math.pi)


@lru_cache(maxsize=64)
def _tag_groups(tags):
    groups = {}
    for j, t in enumerate(tags):
        if t not in TRANSFORMS:
            raise ConfigError(f"unknown transform {t!r} (expected one of {TRANSFORMS})")
        groups.setdefault(t, []).append(j)
    return {t: np.array(ix) for t, ix in groups.items()}


def _tags(model_or_tags, p=None):
    if model_or_tags is None:
        return ("identity",) * p
    if isinstance(model_or_tags, PopulationModel):
        return model_or_tags.transforms
    if isinstance(model_or_tags, str):
        return (model_or_tags,) * p
    return tuple(model_or_tags)


def transform_forward(psi, model) -> np.ndarray:
    """Map natural-scale parameters to the Gaussian scale, ``phi = u(psi)``.

    ``model`` is a :class:`PopulationModel`, a sequence of tags, or a single tag
    applied to every coordinate.
    """
    psi = np.asarray(psi, dtype=float)
    tags = _tags(model, psi.shape[-1])
    if len(tags) != psi.shape[-1]:
        raise ConfigError(f"expected {len(tags)} parameters, got {psi.shape[-1]}")
    out = psi.copy()
    for tag, ix in _tag_groups(tags).items():
        x = psi[..., ix]
        if tag == "identity":
            continue
        if tag == "log":
            if np.any(x <= 0):
                raise DomainError("log transform needs strictly positive values")
            out[..., ix] = np.log(x)
        else:
            if np.any((x <= 0) | (x >= 1)):
                raise DomainError(f"{tag} transform needs values in (0, 1)")
            out[..., ix] = special.logit(x) if tag == "logit" else special.ndtri(x)
    return out


def _backward_with_slope(phi, tags):
    psi = phi.copy()
    slope = np.ones_like(phi)
    with np.errstate(over="ignore"):
        _fill_backward(phi, psi, slope, tags)
    return psi, slope


def _fill_backward(phi, psi, slope, tags):
    for tag, ix in _tag_groups(tags).items():
        x = phi[..., ix]
        if tag == "log":
            v = np.exp(x)
            psi[..., ix] = v
            slope[..., ix] = v
        elif tag == "logit":
            v = special.expit(x)
            psi[..., ix] = v
            slope[..., ix] = v * (1.0 - v)
        elif tag == "probit":
            psi[..., ix] = special.ndtr(x)
            slope[..., ix] = np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def transform_backward(phi, model):
    """Inverse transform ``psi = u^{-1}(phi)``; propagates dual numbers."""
    if isinstance(phi, ad.Dual):
        tags = _tags(model, phi.val.shape[-1])
        psi, slope = _backward_with_slope(phi.val, tags)
        return ad.Dual(psi, phi.der * slope[..., None])
    phi = np.asarray(phi, dtype=float)
    tags = _tags(model, phi.shape[-1])
    groups = _tag_groups(tags)
    if len(groups) == 1:
        if "identity" in groups:
            return phi.copy()
        if "log" in groups:
            with np.errstate(over="ignore"):
                return np.exp(phi)
    return _backward_with_slope(phi, tags)[0]


def log_abs_jacobian(psi, model) -> float:
    """``sum_j log|u_j'(psi_j)|``, the density correction from phi to psi scale."""
    psi = np.asarray(psi, dtype=float)
    tags = _tags(model, psi.shape[-1])
    total = np.zeros(psi.shape[:-1])
    for tag, ix in _tag_groups(tags).items():
        x = psi[..., ix]
        if tag == "log":
            total = total - np.log(x).sum(axis=-1)
        elif tag == "logit":
            total = total - np.log(x * (1.0 - x)).sum(axis=-1)
        elif tag == "probit":
            z = special.ndtri(x)
            total = total + (0.5 * z * z + 0.5 * LOG2PI).sum(axis=-1)
    return total


@dataclass(frozen=True, eq=False)
class IndividualData:
    """Observations of one subject.

    Continuous subjects carry ``times``/``values``; time-to-event subjects carry
    ``event_times`` and the censoring time ``tau_c``.
    """

    id: object
    times: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    dose: float = 0.0
    covariates: Optional[np.ndarray] = None
    event_times: Optional[np.ndarray] = None
    tau_c: Optional[float] = None
    censored: bool = True

    def __post_init__(self):
        conv = lambda a: None if a is None else np.atleast_1d(np.asarray(a, dtype=float))
        object.__setattr__(self, "times", conv(self.times))
        object.__setattr__(self, "values", conv(self.values))
        object.__setattr__(self, "covariates", conv(self.covariates))
        object.__setattr__(self, "event_times", conv(self.event_times))
        if self.dose is None or self.dose < 0:
            raise DomainError(f"individual {self.id}: dose must be nonnegative")
        if self.values is not None:
            if self.times is None or len(self.times) != len(self.values):
                raise DomainError(f"individual {self.id}: times and values lengths differ")
            if np.any(self.times < 0) or np.any(np.diff(self.times) <= 0):
                raise DomainError(f"individual {self.id}: times must be nonnegative and strictly increasing")
        elif self.tau_c is not None or self.event_times is not None:
            ev = self.event_times if self.event_times is not None else np.zeros(0)
            object.__setattr__(self, "event_times", ev)
            tau = self.tau_c
            if tau is None:
                if self.censored or ev.size == 0:
                    raise DomainError(f"individual {self.id}: censoring time required")
                tau = float(ev[-1])
            object.__setattr__(self, "tau_c", float(tau))
            if np.any(ev < 0) or np.any(np.diff(ev) <= 0):
                raise DomainError(f"individual {self.id}: event times must be increasing")
            if ev.size and ev[-1] > self.tau_c:
                raise DomainError(f"individual {self.id}: event after censoring time")
            if not self.censored and (ev.size == 0 or ev[-1] != self.tau_c):
                raise DomainError(f"individual {self.id}: uncensored record must end with an event at tau_c")
        else:
            raise DomainError(f"individual {self.id}: no observations")

    @property
    def kind(self) -> str:
        return "continuous" if self.values is not None else "tte"

    @property
    def n_obs(self) -> int:
        return len(self.values) if self.values is not None else len(self.event_times)


@dataclass(frozen=True, eq=False)
class PopulationModel:
    """Typical values, random-effect covariance and transforms.

    ``omega`` is the covariance of the random effects on the transformed scale.
    For a Student prior it is the covariance ``d/(d-2) * shape``.
    ``beta`` has one row per covariate: ``m_i = u(psi_pop) + c_i @ beta``.
    """

    names: tuple
    psi_pop: np.ndarray
    omega: np.ndarray
    transforms: tuple = None
    beta: Optional[np.ndarray] = None
    covariate_names: tuple = ()
    prior: str = "gaussian"
    dof: Optional[int] = None
    omega_structure: str = "diagonal"

    def __post_init__(self):
        psi = np.atleast_1d(np.asarray(self.psi_pop, dtype=float))
        p = psi.size
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        object.__setattr__(self, "psi_pop", psi)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "names", tuple(self.names) if self.names else
                           tuple(f"p{j + 1}" for j in range(p)))
        tr = self.transforms
        object.__setattr__(self, "transforms", ("identity",) * p if tr is None else
                           ((tr,) * p if isinstance(tr, str) else tuple(tr)))
        if len(self.names) != p or len(self.transforms) != p:
            raise ConfigError("names/transforms length must match psi_pop")
        if omega.shape != (p, p):
            raise ConfigError(f"omega must be {p}x{p}, got {omega.shape}")
        if not np.allclose(omega, omega.T, rtol=1e-12, atol=1e-14):
            raise ConfigError("omega must be symmetric")
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError:
            raise ConfigError("omega is not positive definite") from None
        transform_forward(psi, self.transforms)  # domain check
        if self.beta is not None:
            beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
            if beta.shape[1] != p:
                raise ConfigError(f"beta must have {p} columns, got shape {beta.shape}")
            object.__setattr__(self, "beta", beta)
            if not self.covariate_names:
                object.__setattr__(self, "covariate_names",
                                   tuple(f"c{j + 1}" for j in range(beta.shape[0])))
            elif len(self.covariate_names) != beta.shape[0]:
                raise ConfigError("covariate_names must match beta rows")
        if self.prior not in ("gaussian", "student"):
            raise ConfigError(f"unknown prior family {self.prior!r}")
        if self.prior == "student" and (self.dof is None or int(self.dof) <= 2):
            raise ConfigError("student prior needs an integer dof > 2")
        if self.omega_structure not in ("diagonal", "full"):
            raise ConfigError("omega_structure must be 'diagonal' or 'full'")

    @classmethod
    def diagonal(cls, names, psi_pop, omega_sd, transforms="log", **kw):
        sd = np.asarray(omega_sd, dtype=float)
        return cls(names=names, psi_pop=psi_pop, omega=np.diag(sd ** 2),
                   transforms=transforms, **kw)

    @property
    def p(self) -> int:
        return self.psi_pop.size

    @property
    def n_covariates(self) -> int:
        return 0 if self.beta is None else self.beta.shape[0]

    @cached_property
    def phi_pop(self) -> np.ndarray:
        return transform_forward(self.psi_pop, self.transforms)

    @cached_property
    def shape_matrix(self) -> np.ndarray:
        """Matrix whose Cholesky factor scales the prior draws (xi for Student)."""
        if self.prior == "student":
            return self.omega * (self.dof - 2.0) / self.dof
        return self.omega

    @cached_property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.shape_matrix)

    @cached_property
    def chol_inv(self) -> np.ndarray:
        return linalg.solve_triangular(self.chol, np.eye(self.p), lower=True)

    @cached_property
    def omega_inv(self) -> np.ndarray:
        """Inverse of the covariance ``omega`` (via its Cholesky factor)."""
        c = linalg.cho_factor(self.omega, lower=True)
        return linalg.cho_solve(c, np.eye(self.p))

    @cached_property
    def _log_norm(self) -> float:
        half_logdet = np.log(np.diag(self.chol)).sum()
        if self.prior == "gaussian":
            return -0.5 * self.p * LOG2PI - half_logdet
        d, p = float(self.dof), self.p
        return (math.lgamma(0.5 * (d + p)) - math.lgamma(0.5 * d)
                - 0.5 * p * math.log(d * math.pi) - half_logdet)

    def replace(self, **changes) -> "PopulationModel":
        return replace(self, **changes)


def prior_mean(individual: Optional[IndividualData], model: PopulationModel) -> np.ndarray:
    """``m_i = u(psi_pop) + c_i @ beta`` on the transformed scale."""
    m = model.phi_pop.copy()
    if model.beta is None:
        return m
    c = None if individual is None else individual.covariates
    if c is None:
        raise ConfigError(f"model has {model.n_covariates} covariates but individual "
                          f"{getattr(individual, 'id', None)} carries none")
    if c.size != model.n_covariates:
        raise ConfigError(f"individual {individual.id}: {c.size} covariates, "
                          f"beta expects {model.n_covariates}")
    return m + c @ model.beta


def _quad_form(delta, model):
    z = delta @ model.chol_inv.T
    return np.einsum("...i,...i->...", z, z)


def prior_logpdf(phi, individual, model: PopulationModel, mean=None):
    """Log density of ``phi`` under the population distribution."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != model.p:
        raise ConfigError(f"phi has {phi.shape[-1]} entries, model has {model.p}")
    m = prior_mean(individual, model) if mean is None else mean
    q = _quad_form(phi - m, model)
    if model.prior == "gaussian":
        return model._log_norm - 0.5 * q
    d = float(model.dof)
    return model._log_norm - 0.5 * (d + model.p) * np.log1p(q / d)


def prior_grad(phi, individual, model: PopulationModel, mean=None) -> np.ndarray:
    """Gradient of :func:`prior_logpdf` with respect to ``phi``."""
    m = prior_mean(individual, model) if mean is None else mean
    delta = np.asarray(phi, dtype=float) - m
    w = model.chol_inv.T @ (model.chol_inv @ delta)
    if model.prior == "gaussian":
        return -w
    d = float(model.dof)
    return -(d + model.p) / (d + delta @ w) * w


def sample_prior(individual, model: PopulationModel, rng, size=None, mean=None):
    """Draw ``phi`` from the population distribution."""
    m = prior_mean(individual, model) if mean is None else mean
    shape = (model.p,) if size is None else (size, model.p)
    z = rng.standard_normal(shape)
    x = z @ model.chol.T
    if model.prior == "student":
        w = rng.chisquare(model.dof, size=None if size is None else (size, 1))
        x = x / np.sqrt(w / model.dof)
    return m + x


@dataclass(frozen=True, eq=False)
class Theta:
    """Global parameters: the population model and (continuous data) error model."""

    population: PopulationModel
    error: object = None

    def components(self) -> dict:
        """Flattened named view, e.g. ``ka_pop, omega_ka, ..., sigma2``."""
        pop = self.population
        out = {}
        for name, v in zip(pop.names, pop.psi_pop):
            out[f"{name}_pop"] = float(v)
        if pop.beta is not None:
            for ci, cname in enumerate(pop.covariate_names):
                for j, name in enumerate(pop.names):
                    out[f"beta_{cname}_{name}"] = float(pop.beta[ci, j])
        for j, name in enumerate(pop.names):
            out[f"omega_{name}"] = float(np.sqrt(pop.omega[j, j]))
        if pop.omega_structure == "full":
            for j in range(pop.p):
                for k in range(j + 1, pop.p):
                    out[f"cov_{pop.names[j]}_{pop.names[k]}"] = float(pop.omega[j, k])
        if self.error is not None:
            out.update(self.error.components())
        return out

    @property
    def names(self) -> list:
        return list(self.components())

    def vector(self) -> np.ndarray:
        return np.array(list(self.components().values()))
