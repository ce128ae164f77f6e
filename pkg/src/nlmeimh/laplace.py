"""Individual MAP estimation and Gaussian (or Student) independent proposals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import dual as ad
from .errors import DomainError, ProposalError
from .likelihood import ConditionalTarget, Target
from .model import LOG2PI, transform_backward

EIG_FLOOR = 1e-8


@dataclass(frozen=True)
class MapResult:
    phi_hat: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool
    logpdf: float = math.nan


@dataclass(frozen=True, eq=False)
class GaussianProposal:
    """Independent proposal centred at the MAP with covariance ``cov``.

    With ``family='student'`` draws are ``mean + chol @ s`` where ``s`` is a
    standard multivariate t with ``dof`` degrees of freedom.
    """

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    family: str = "gaussian"
    dof: int = 3
    repaired: bool = False

    def __post_init__(self):
        if self.family not in ("gaussian", "student"):
            raise ProposalError(f"unknown proposal family {self.family!r}")
        inv = linalg.solve_triangular(self.chol, np.eye(self.p), lower=True)
        object.__setattr__(self, "_chol_inv", inv)
        half_logdet = float(np.log(np.diag(self.chol)).sum())
        if self.family == "gaussian":
            norm = -0.5 * self.p * LOG2PI - half_logdet
        else:
            nu, p = float(self.dof), self.p
            norm = (math.lgamma(0.5 * (nu + p)) - math.lgamma(0.5 * nu)
                    - 0.5 * p * math.log(nu * math.pi) - half_logdet)
        object.__setattr__(self, "_norm", norm)

    @classmethod
    def from_covariance(cls, mean, cov, **kw):
        cov = 0.5 * (cov + cov.T)
        return cls(np.asarray(mean, float), cov, np.linalg.cholesky(cov), **kw)

    @property
    def p(self) -> int:
        return self.mean.size

    def with_family(self, family, dof=3) -> "GaussianProposal":
        return GaussianProposal(self.mean, self.cov, self.chol, family, dof, self.repaired)

    def sample(self, rng) -> np.ndarray:
        z = self.chol @ rng.standard_normal(self.p)
        if self.family == "student":
            z = z / math.sqrt(rng.chisquare(self.dof) / self.dof)
        return self.mean + z

    def logpdf(self, x) -> float:
        z = self._chol_inv @ (np.asarray(x, float) - self.mean)
        q = float(z @ z)
        if self.family == "gaussian":
            return self._norm - 0.5 * q
        nu = float(self.dof)
        return self._norm - 0.5 * (nu + self.p) * math.log1p(q / nu)


def bfgs(fun, fun_grad, x0, h0=None, tol=1e-6, max_iter=200, c1=1e-4):
    """Minimize ``fun`` by BFGS with Armijo backtracking.

    ``fun_grad(x)`` returns ``(f, g)``; ``fun(x)`` may return ``inf`` outside
    the evaluable region.  ``h0`` seeds the inverse Hessian.
    Returns ``(x, f, g, iterations)``.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    h0 = np.eye(n) if h0 is None else np.asarray(h0, float)
    hinv = h0.copy()
    f, g = fun_grad(x)
    it = 0
    while it < max_iter and np.linalg.norm(g) >= tol:
        it += 1
        d = -hinv @ g
        slope = g @ d
        if not slope < 0:
            hinv = h0.copy()
            d = -hinv @ g
            slope = g @ d
        t = 1.0
        while True:
            x_new = x + t * d
            f_new = fun(x_new)
            if f_new <= f + c1 * t * slope:
                break
            t *= 0.5
            if t < 1e-20:
                return x, f, g, it
        f_new, g_new = fun_grad(x_new)
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            hy = hinv @ y
            hinv = (hinv - rho * (np.outer(s, hy) + np.outer(hy, s))
                    + (rho * rho * (y @ hy) + rho) * np.outer(s, s))
        x, f, g = x_new, f_new, g_new
    return x, f, g, it


def _newton_polish(target: Target, x, lp, g, steps=4):
    """A few Newton steps on the FD Hessian to push the gradient to round-off."""
    for _ in range(steps):
        gn = np.linalg.norm(g)
        if gn == 0:
            break
        try:
            c = linalg.cho_factor(-target.hessian(x), lower=True)
        except (linalg.LinAlgError, ValueError):
            break
        x_new = x + linalg.cho_solve(c, g)
        lp_new = target.safe_logpdf(x_new)
        if not lp_new >= lp - 1e-10 * (1 + abs(lp)):
            break
        lp_new, g_new = target.value_and_grad(x_new)
        if not np.linalg.norm(g_new) < gn:
            break
        x, lp, g = x_new, lp_new, g_new
    return x, lp, g


def map_estimate(target: Target, init=None, tol=1e-6, max_iter=200, polish=True) -> MapResult:
    """Maximize the unnormalized conditional density of ``target``."""
    x0 = target.mean.copy() if init is None else np.asarray(init, float)
    lp0 = target.safe_logpdf(x0)
    if not math.isfinite(lp0):
        raise DomainError(f"target cannot be evaluated at the MAP starting point {x0}")

    def fun(x):
        return -target.safe_logpdf(x)

    def fun_grad(x):
        v, g = target.value_and_grad(x)
        return -v, -g

    x, f, g, it = bfgs(fun, fun_grad, x0, h0=target.population.omega, tol=tol,
                       max_iter=max_iter)
    lp, grad = -f, -g
    if polish:
        x, lp, grad = _newton_polish(target, x, lp, grad)
    gn = float(np.linalg.norm(grad))
    return MapResult(x, gn, it, gn < tol, float(lp))


def compute_map(individual, obs_model, theta, init=None, tol=1e-6, max_iter=200) -> MapResult:
    """MAP of ``p(phi_i | y_i; theta)``; cold start at the prior mean ``m_i``."""
    return map_estimate(ConditionalTarget(individual, obs_model, theta), init, tol, max_iter)


def _proposal_from_precision(mean, precision, family="gaussian", dof=3) -> GaussianProposal:
    precision = 0.5 * (precision + precision.T)
    if not np.all(np.isfinite(precision)):
        raise ProposalError("proposal precision is not finite")
    lam_min = float(np.linalg.eigvalsh(precision)[0])
    repaired = lam_min < EIG_FLOOR
    if repaired:
        precision = precision + (EIG_FLOOR - lam_min) * np.eye(len(mean))
    try:
        c = linalg.cho_factor(precision, lower=True)
        cov = linalg.cho_solve(c, np.eye(len(mean)))
        cov = 0.5 * (cov + cov.T)
        chol = np.linalg.cholesky(cov)
    except (linalg.LinAlgError, np.linalg.LinAlgError):
        raise ProposalError("proposal covariance is not positive definite") from None
    return GaussianProposal(np.asarray(mean, float), cov, chol, family, dof, repaired)


def laplace_target_proposal(target: Target, map_result: MapResult, family="gaussian",
                            dof=3) -> GaussianProposal:
    """Laplace proposal: covariance ``(-H + Omega^{-1})^{-1}``, H the log-likelihood Hessian."""
    phi = map_result.phi_hat
    H = target.hessian(phi, loglik_only=True)
    return _proposal_from_precision(phi, -H + target.population.omega_inv, family, dof)


def laplace_proposal(individual, obs_model, theta, map_result: MapResult,
                     family="gaussian", dof=3) -> GaussianProposal:
    target = ConditionalTarget(individual, obs_model, theta)
    return laplace_target_proposal(target, map_result, family, dof)


def _linearization(target: ConditionalTarget, phi):
    ind, theta = target.individual, target.theta
    structural = target.model.structural
    psi = transform_backward(ad.Dual.variables(phi), theta.population)
    with np.errstate(over="ignore", invalid="ignore"):
        f = structural(ind.times, psi, ind.dose)
    if isinstance(f, ad.Dual):
        fv, J = f.val, f.der
    else:
        fv, J = np.asarray(f, float), np.zeros((ind.times.size, target.p))
    g = np.broadcast_to(np.asarray(theta.error.sd(fv), float), fv.shape)
    if not (np.all(np.isfinite(J)) and np.all(g > 0)):
        raise ProposalError("structural Jacobian or residual sd is not usable at the MAP")
    return fv, J, 1.0 / (g * g)


def linearized_target_proposal(target: ConditionalTarget, map_result: MapResult,
                               family="gaussian", dof=3) -> GaussianProposal:
    """Linearized proposal: covariance ``(J' Sigma^{-1} J + Omega^{-1})^{-1}`` at the MAP."""
    if target.model.kind != "continuous":
        raise ProposalError("linearization needs a continuous observation model")
    phi = map_result.phi_hat
    _, J, w = _linearization(target, phi)
    precision = J.T @ (w[:, None] * J) + target.population.omega_inv
    return _proposal_from_precision(phi, precision, family, dof)


def linearized_proposal(individual, obs_model, theta, map_result: MapResult,
                        family="gaussian", dof=3) -> GaussianProposal:
    target = ConditionalTarget(individual, obs_model, theta)
    return linearized_target_proposal(target, map_result, family, dof)


def linearized_conditional_mean(individual, obs_model, theta, phi_hat) -> np.ndarray:
    """Conditional mean of ``phi`` in the model linearized at ``phi_hat``.

    ``Gamma (J' Sigma^{-1} (y - f + J phi_hat) + Omega^{-1} m)``; equals
    ``phi_hat`` whenever ``phi_hat`` is a stationary point of the constant-error
    joint density.
    """
    target = ConditionalTarget(individual, obs_model, theta)
    phi_hat = np.asarray(phi_hat, float)
    fv, J, w = _linearization(target, phi_hat)
    oinv = theta.population.omega_inv
    z = individual.values - fv + J @ phi_hat
    precision = J.T @ (w[:, None] * J) + oinv
    rhs = J.T @ (w * z) + oinv @ target.mean
    return linalg.cho_solve(linalg.cho_factor(precision, lower=True), rhs)


def exact_linear_conditional(A, y, sigma2, m, omega) -> GaussianProposal:
    """Posterior of ``phi`` in ``y = A phi + e``, ``e ~ N(0, sigma2 I)``, ``phi ~ N(m, omega)``."""
    A = np.atleast_2d(np.asarray(A, float))
    y = np.atleast_1d(np.asarray(y, float))
    m = np.atleast_1d(np.asarray(m, float))
    omega = np.atleast_2d(np.asarray(omega, float))
    if A.shape != (y.size, m.size) or omega.shape != (m.size, m.size):
        raise ProposalError("inconsistent dimensions for the linear model")
    try:
        oinv = linalg.cho_solve(linalg.cho_factor(omega, lower=True), np.eye(m.size))
        precision = A.T @ A / sigma2 + oinv
        precision = 0.5 * (precision + precision.T)
        c = linalg.cho_factor(precision, lower=True)
    except (linalg.LinAlgError, ValueError):
        raise ProposalError("singular normal equations") from None
    mu = linalg.cho_solve(c, A.T @ y / sigma2 + oinv @ m)
    cov = linalg.cho_solve(c, np.eye(m.size))
    cov = 0.5 * (cov + cov.T)
    return GaussianProposal(mu, cov, np.linalg.cholesky(cov))


def build_proposal(target: Target, map_result: MapResult, approximation="auto",
                   family="gaussian", dof=3) -> GaussianProposal:
    """Pick the linearized proposal for continuous data, Laplace otherwise."""
    if approximation == "auto":
        model = getattr(target, "model", None)
        approximation = "linearized" if getattr(model, "kind", None) == "continuous" else "laplace"
    if approximation == "linearized":
        return linearized_target_proposal(target, map_result, family, dof)
    if approximation == "laplace":
        return laplace_target_proposal(target, map_result, family, dof)
    raise ProposalError(f"unknown approximation {approximation!r}")
