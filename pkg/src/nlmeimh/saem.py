"""Stochastic approximation EM for the population parameters.

Each iteration runs ``M`` MCMC transitions per individual (the kernel may
change with the iteration, which is how f-SAEM is expressed), folds the
complete-data sufficient statistics into a running average with stepsize
``gamma_k`` and maximizes the resulting complete-data likelihood in closed form.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, NlmeError
from .laplace import map_estimate
from .likelihood import ConditionalTarget, ErrorModel
from .model import (PopulationModel, Theta, prior_mean, sample_prior,
                    transform_backward)
from .samplers import KERNELS, RwmAdaptState, SamplerConfig, run_chain
from .streams import stream

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-8
VAR_FLOOR = 1e-12
DEFAULT_M = {"nlme_imh": 1}


def gamma_schedule(k: int, burn_len: int, decay: float) -> float:
    """``1`` for ``k <= K1``, then ``(k - K1)^-a``."""
    return 1.0 if k <= burn_len else float(k - burn_len) ** (-decay)


@dataclass
class SaemConfig:
    """SAEM settings.

    ``kernel_schedule`` is a list of ``(first, last, kernel)`` with inclusive
    1-based iteration bounds; ``last=None`` runs to the end.
    ``mcmc_transitions=None`` means 5 per iteration for random-walk kernels
    and 1 for nlme-IMH.
    """

    n_iter: int = 200
    burn_len: int = 100
    decay: float = 0.7
    mcmc_transitions: Optional[int] = None
    kernel_schedule: list = field(default_factory=lambda: [(1, None, "rwm_cycle")])
    seed: int = 0
    family: str = "gaussian"
    approximation: str = "auto"

    def __post_init__(self):
        if self.n_iter < 0:
            raise ConfigError("n_iter must be nonnegative")
        if self.n_iter > 0 and not 0 <= self.burn_len < self.n_iter:
            raise ConfigError("burn_len must satisfy 0 <= burn_len < n_iter")
        if not 0.5 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0.5, 1]")
        if self.mcmc_transitions is not None and self.mcmc_transitions < 1:
            raise ConfigError("mcmc_transitions must be >= 1")
        sched = [tuple(s) for s in self.kernel_schedule]
        for first, last, kernel in sched:
            if kernel not in KERNELS:
                raise ConfigError(f"unknown kernel {kernel!r} in kernel_schedule")
            if first < 1 or (last is not None and last < first):
                raise ConfigError(f"bad iteration range ({first}, {last}) in kernel_schedule")
        self.kernel_schedule = sched
        if self.n_iter and self.kernel_at(1) is None:
            raise ConfigError("kernel_schedule must cover iteration 1")

    def kernel_at(self, k: int) -> Optional[str]:
        """Kernel of iteration ``k``; the last matching range wins, gaps keep the previous kernel."""
        kern = None
        for first, last, kernel in self.kernel_schedule:
            if first <= k and (last is None or k <= last):
                kern = kernel
        if kern is None and k > 1:
            return self.kernel_at(k - 1)
        return kern

    def transitions(self, kernel: str) -> int:
        if self.mcmc_transitions is not None:
            return self.mcmc_transitions
        return DEFAULT_M.get(kernel, 5)

    def gamma(self, k: int) -> float:
        return gamma_schedule(k, self.burn_len, self.decay)


def fsaem_config(switch: int = 20, after="rwm_cycle", **kw) -> SaemConfig:
    """f-SAEM: nlme-IMH for iterations ``1..switch``, ``after`` from then on."""
    return SaemConfig(kernel_schedule=[(1, switch, "nlme_imh"), (switch + 1, None, after)], **kw)


@dataclass
class SufficientStats:
    """Complete-data statistics.

    ``s1 = sum_i x_i phi_i^T`` with ``x_i = (1, c_i)`` (its first row is the
    plain sum of the ``phi_i``), ``s2 = sum_i phi_i phi_i^T`` and ``s3`` the
    residual sum of squares (relative residuals for the proportional model).
    """

    s1: np.ndarray
    s2: np.ndarray
    s3: float
    n_subjects: int
    n_obs: int
    xtx: np.ndarray
    phi: Optional[np.ndarray] = None

    @property
    def mean(self) -> np.ndarray:
        """``s1/N`` (intercept row)."""
        return self.s1[0] / self.n_subjects

    def updated(self, other: "SufficientStats", gamma: float) -> "SufficientStats":
        """``s + gamma (S - s)``."""
        g = float(gamma)
        return SufficientStats(self.s1 + g * (other.s1 - self.s1),
                               self.s2 + g * (other.s2 - self.s2),
                               self.s3 + g * (other.s3 - self.s3),
                               self.n_subjects, self.n_obs, self.xtx, other.phi)


def design_matrix(dataset, population: PopulationModel) -> np.ndarray:
    """Rows ``x_i = (1, c_i)``."""
    q = population.n_covariates
    X = np.ones((len(dataset), 1 + q))
    for i, ind in enumerate(dataset):
        if q:
            if ind.covariates is None or ind.covariates.size != q:
                raise ConfigError(f"individual {ind.id}: expected {q} covariates")
            X[i, 1:] = ind.covariates
    return X


def residual_statistic(phi, dataset, obs_model, theta: Theta) -> float:
    """Sum of squared (relative for proportional error) residuals at ``phi``."""
    if getattr(obs_model, "kind", None) != "continuous":
        return 0.0
    kind = theta.error.kind
    tr = theta.population.transforms
    total = 0.0
    for ind, x in zip(dataset, phi):
        psi = transform_backward(x, tr)
        f = np.asarray(obs_model.structural(ind.times, psi, ind.dose), float)
        r = ind.values - f
        if kind == "proportional":
            r = r / f
        total += float(r @ r)
    return total


def compute_stats(phi, dataset, obs_model, theta: Theta, X) -> SufficientStats:
    phi = np.asarray(phi, float)
    n_obs = sum(ind.n_obs for ind in dataset) if obs_model.kind == "continuous" else 0
    return SufficientStats(X.T @ phi, phi.T @ phi, residual_statistic(phi, dataset, obs_model, theta),
                           len(dataset), n_obs, X.T @ X, phi.copy())


def _check_supported(theta: Theta, obs_model):
    if theta.population.prior != "gaussian":
        raise ConfigError("SAEM M-step needs a Gaussian population distribution")
    if obs_model.kind == "continuous":
        if theta.error is None or theta.error.kind == "combined":
            raise ConfigError("SAEM M-step supports constant or proportional error models only")


def mstep(stats: SufficientStats, template: Theta, flags: Optional[list] = None) -> Theta:
    """Closed-form maximizer of the complete-data likelihood given ``stats``.

    ``template`` supplies names, transforms, covariate layout, Omega structure
    and the error-model kind.  Degenerate updates are repaired and noted in
    ``flags`` (``omega_floor`` / ``sigma2_floor``).
    """
    flags = [] if flags is None else flags
    pop = template.population
    N = stats.n_subjects
    B = np.linalg.solve(stats.xtx, stats.s1)
    omega = (stats.s2 - B.T @ stats.xtx @ B) / N
    omega = 0.5 * (omega + omega.T)
    if pop.omega_structure == "diagonal":
        omega = np.diag(np.diag(omega))
    w, V = np.linalg.eigh(omega)
    if w[0] < EIG_FLOOR:
        flags.append("omega_floor")
        omega = (V * np.maximum(w, EIG_FLOOR)) @ V.T
        omega = 0.5 * (omega + omega.T)
        if pop.omega_structure == "diagonal":
            omega = np.diag(np.diag(omega))
    psi_pop = transform_backward(B[0], pop.transforms)
    beta = B[1:] if pop.n_covariates else None
    new_pop = pop.replace(psi_pop=psi_pop, omega=omega, beta=beta)
    error = template.error
    if error is not None and stats.n_obs > 0:
        s2 = stats.s3 / stats.n_obs
        if not s2 >= VAR_FLOOR:
            flags.append("sigma2_floor")
            s2 = VAR_FLOOR
        if error.kind == "constant":
            error = ErrorModel.constant(s2)
        elif error.kind == "proportional":
            error = ErrorModel("proportional", (math.sqrt(s2),))
        else:
            raise ConfigError("combined error model is not supported by the M-step")
    return Theta(new_pop, error)


def complete_loglik(theta: Theta, stats: SufficientStats) -> float:
    """Complete-data log-likelihood in ``theta`` expressed through ``stats`` (up to constants)."""
    pop = theta.population
    N = stats.n_subjects
    B = np.vstack([pop.phi_pop[None, :]] + ([pop.beta] if pop.beta is not None else []))
    scatter = stats.s2 - stats.s1.T @ B - B.T @ stats.s1 + B.T @ stats.xtx @ B
    sign, logdet = np.linalg.slogdet(pop.omega)
    q = -0.5 * N * logdet - 0.5 * float(np.sum(pop.omega_inv * scatter))
    if theta.error is not None and stats.n_obs > 0:
        e = theta.error
        v = e.sigma2 if e.kind == "constant" else e.params[0] ** 2
        q += -0.5 * stats.n_obs * math.log(v) - 0.5 * stats.s3 / v
    return q


@dataclass
class SaemTrace:
    """Per-iteration estimates; row ``k-1`` holds ``theta_k``."""

    names: list
    theta: np.ndarray
    gamma: np.ndarray
    kernel: list
    acceptance: np.ndarray
    flags: list
    final: Theta
    theta0: Theta = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.gamma)

    def component(self, name) -> np.ndarray:
        if name not in self.names:
            raise KeyError(f"unknown component {name!r}; have {self.names}")
        return self.theta[:, self.names.index(name)]

    def final_components(self) -> dict:
        return self.final.components()

    def to_csv(self, path):
        """``iter,gamma,kernel,<theta components>``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "gamma", "kernel"] + list(self.names))
            for k in range(len(self)):
                w.writerow([k + 1, repr(float(self.gamma[k])), self.kernel[k]]
                           + [repr(float(v)) for v in self.theta[k]])


def _initial_draws(dataset, obs_model, theta, seed, at_map=False):
    phi = []
    for i, ind in enumerate(dataset):
        target = ConditionalTarget(ind, obs_model, theta)
        x = target.mean.copy()
        if at_map:
            try:
                res = map_estimate(target)
                if res.converged:
                    x = res.phi_hat
            except NlmeError:
                pass
        if not target.safe_loglik(x) > -math.inf:
            rng = stream(seed, "saem-init", i)
            for _ in range(100):
                x = sample_prior(ind, theta.population, rng)
                if target.safe_loglik(x) > -math.inf:
                    break
            else:
                raise ConfigError(f"individual {ind.id}: no evaluable starting point under theta0")
        phi.append(x)
    return np.array(phi)


def saem_fit(dataset, obs_model, theta0: Theta, config: SaemConfig = None,
             callback=None) -> SaemTrace:
    """Run SAEM from ``theta0``; ``callback(k, theta)`` is called after each M-step."""
    config = SaemConfig() if config is None else config
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("dataset is empty")
    _check_supported(theta0, obs_model)
    theta = theta0
    names = theta0.names
    K = config.n_iter
    X = design_matrix(dataset, theta0.population)
    for ind in dataset:
        prior_mean(ind, theta0.population)  # covariate layout check
    phi = _initial_draws(dataset, obs_model, theta0, config.seed,
                         at_map=K > 0 and config.kernel_at(1) == "nlme_imh")
    adapt = [RwmAdaptState.from_population(theta0.population) for _ in dataset]
    rows, gammas, kernels, accs, flags = [], [], [], [], []
    fallbacks = 0
    stats = None
    for k in range(1, K + 1):
        kernel = config.kernel_at(k)
        M = config.transitions(kernel)
        scfg = SamplerConfig(kernel=kernel, n_iter=M, seed=config.seed, family=config.family,
                             approximation=config.approximation)
        n_acc = 0
        for i, ind in enumerate(dataset):
            target = ConditionalTarget(ind, obs_model, theta)
            tr = run_chain(target, scfg, rng=stream(config.seed, "saem", k, i), adapt=adapt[i],
                           init=phi[i])
            phi[i] = tr.samples[-1]
            n_acc += int(tr.accepted.sum())
            fallbacks += bool(tr.meta.get("fallback"))
        g = config.gamma(k)
        new = compute_stats(phi, dataset, obs_model, theta, X)
        stats = new if stats is None else stats.updated(new, g)
        step_flags = []
        theta = mstep(stats, theta0, step_flags)
        if step_flags:
            log.info("iteration %d: %s", k, ", ".join(step_flags))
        rows.append(list(theta.components().values()))
        gammas.append(g)
        kernels.append(kernel)
        accs.append(n_acc / (M * len(dataset)))
        flags.append(step_flags)
        if callback is not None:
            callback(k, theta)
    theta_arr = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return SaemTrace(names, theta_arr, np.array(gammas), kernels, np.array(accs), flags,
                     theta, theta0, {"fallbacks": fallbacks, "stats": stats, "phi": phi})


def fsaem_fit(dataset, obs_model, theta0: Theta, config: SaemConfig = None,
              switch: int = 20, callback=None) -> SaemTrace:
    """SAEM whose first ``switch`` iterations use nlme-IMH transitions (one per iteration)."""
    base = SaemConfig() if config is None else config
    cfg = SaemConfig(n_iter=base.n_iter, burn_len=base.burn_len, decay=base.decay,
                     mcmc_transitions=base.mcmc_transitions,
                     kernel_schedule=[(1, switch, "nlme_imh"), (switch + 1, None, "rwm_cycle")],
                     seed=base.seed, family=base.family, approximation=base.approximation)
    return saem_fit(dataset, obs_model, theta0, cfg, callback)
