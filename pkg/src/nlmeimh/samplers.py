"""Metropolis-Hastings kernels for individual conditional distributions.

Every kernel runs on the transformed scale ``phi``.  Available kernels:

``prior_imh``
    independent proposals from the population distribution; accepted on the
    likelihood ratio alone.
``rwm_componentwise`` / ``rwm_blockwise`` / ``rwm_cycle``
    Gaussian random walks with Robbins-Monro scale adaptation;
    ``rwm_cycle`` chains a prior draw, a component-wise sweep and a block move
    in each iteration (the usual reference kernel).
``mala``
    Langevin proposals ``N(x + g grad, 2 g I)``.
``nlme_imh``
    independent proposals from the Laplace / linearized Gaussian (or Student)
    approximation of the conditional distribution.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from .errors import (ConfigError, DomainError, EvaluationError, InvalidStateError,
                     ProposalError)
from .laplace import GaussianProposal, build_proposal, map_estimate
from .likelihood import ConditionalTarget, Target
from .model import sample_prior, transform_backward
from .streams import stream

log = logging.getLogger(__name__)

KERNELS = ("prior_imh", "rwm_componentwise", "rwm_blockwise", "rwm_cycle", "mala", "nlme_imh")
MIN_SCALE = 1e-8


class MHStep(NamedTuple):
    state: np.ndarray
    accepted: bool
    log_target: float
    log_alpha: float


def mh_accept(log_alpha: float, rng) -> bool:
    """Accept with probability ``min(1, exp(log_alpha))``; always consumes one uniform."""
    u = rng.random()
    return log_alpha >= 0 or (log_alpha > -math.inf and math.log(u) < log_alpha)


def mh_step(state, proposal_draw, log_q, target_logpdf, rng, logp_state=None) -> MHStep:
    """One generic Metropolis-Hastings transition.

    ``proposal_draw(state, rng)`` returns a candidate, ``log_q(to, frm)`` the
    proposal log density (``None`` for symmetric or cancelling proposals) and
    ``target_logpdf`` the unnormalized target, ``-inf`` where it vanishes.
    """
    if logp_state is None:
        logp_state = target_logpdf(state)
    if not logp_state > -math.inf:
        raise InvalidStateError("target density is zero at the current state")
    cand = proposal_draw(state, rng)
    logp_c = target_logpdf(cand)
    if logp_c > -math.inf:
        log_alpha = logp_c - logp_state
        if log_q is not None:
            log_alpha += log_q(state, cand) - log_q(cand, state)
    else:
        log_alpha = -math.inf
    if mh_accept(log_alpha, rng):
        return MHStep(cand, True, logp_c, log_alpha)
    return MHStep(state, False, logp_state, log_alpha)


@dataclass
class ChainTrace:
    """Samples of one chain (phi scale) with per-step acceptance and provenance."""

    samples: np.ndarray
    accepted: np.ndarray
    log_target: np.ndarray
    kernel: list
    init: np.ndarray
    transforms: tuple = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.accepted)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self) else math.nan

    def psi(self) -> np.ndarray:
        return transform_backward(self.samples, self.transforms)

    def to_csv(self, path):
        """Write ``iter,accepted,log_target,phi_1..phi_p,psi_1..psi_p``."""
        p = self.samples.shape[1] if self.samples.ndim == 2 else len(self.init)
        header = (["iter", "accepted", "log_target"] + [f"phi_{j + 1}" for j in range(p)]
                  + [f"psi_{j + 1}" for j in range(p)])
        psi = self.psi() if len(self) else np.zeros((0, p))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self)):
                w.writerow([k + 1, int(self.accepted[k]), repr(float(self.log_target[k]))]
                           + [repr(float(v)) for v in self.samples[k]]
                           + [repr(float(v)) for v in psi[k]])


@dataclass
class RwmAdaptState:
    """Per-coordinate and block random-walk log-scales with Robbins-Monro updates.

    After every ``window`` moves of a kind, ``log_scale += n**-0.6 * (rate - target)``
    where ``n`` counts the updates made so far.
    """

    log_scales: np.ndarray
    block_log_scale: float = 0.0
    target_rate: float = 0.44
    block_target_rate: float = 0.234
    window: int = 1
    n_updates: np.ndarray = None
    block_updates: int = 0
    _acc: np.ndarray = None
    _block_acc: list = field(default_factory=list)

    def __post_init__(self):
        self.log_scales = np.asarray(self.log_scales, dtype=float).copy()
        p = self.log_scales.size
        if self.n_updates is None:
            self.n_updates = np.zeros(p, dtype=int)
        if self._acc is None:
            self._acc = [[] for _ in range(p)]
        if not 0 < self.target_rate < 1 or not 0 < self.block_target_rate < 1:
            raise ConfigError("target acceptance rates must lie in (0, 1)")

    @classmethod
    def from_population(cls, population, **kw) -> "RwmAdaptState":
        """Start from the prior standard deviations."""
        return cls(np.log(np.sqrt(np.diag(population.omega))), **kw)

    @property
    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scales), MIN_SCALE)

    @property
    def block_scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scales + self.block_log_scale), MIN_SCALE)

    def update_component(self, j: int, accepted: bool):
        buf = self._acc[j]
        buf.append(accepted)
        if len(buf) >= self.window:
            self.n_updates[j] += 1
            self.log_scales[j] += self.n_updates[j] ** -0.6 * (sum(buf) / len(buf) - self.target_rate)
            buf.clear()

    def update_block(self, accepted: bool):
        buf = self._block_acc
        buf.append(accepted)
        if len(buf) >= self.window:
            self.block_updates += 1
            self.block_log_scale += self.block_updates ** -0.6 * (sum(buf) / len(buf) - self.block_target_rate)
            buf.clear()


@dataclass
class SamplerConfig:
    kernel: str = "nlme_imh"
    n_iter: int = 1000
    seed: int = 0
    init: Union[str, np.ndarray] = "auto"
    stepsize: float = 1e-2
    family: str = "gaussian"
    dof: int = 3
    approximation: str = "auto"
    map_tol: float = 1e-6
    map_max_iter: int = 200

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r} (expected one of {KERNELS})")
        if self.n_iter < 0:
            raise ConfigError("n_iter must be nonnegative")
        if self.kernel == "mala" and not self.stepsize > 0:
            raise ConfigError("MALA stepsize must be positive")
        if self.family not in ("gaussian", "student"):
            raise ConfigError(f"unknown proposal family {self.family!r}")
        if isinstance(self.init, str) and self.init not in ("auto", "prior_mean", "prior_draw", "map"):
            raise ConfigError(f"unknown init {self.init!r}")


class _Chain:
    """Mutable chain state with cached log-likelihood / log-target."""

    def __init__(self, target: Target, phi, rng):
        self.target = target
        self.rng = rng
        self.phi = np.asarray(phi, dtype=float).copy()
        self.ll = target.safe_loglik(self.phi)
        if not self.ll > -math.inf:
            raise InvalidStateError(f"target density is zero at the initial state {self.phi}")
        self.lp = self.ll + target.logprior(self.phi)
        self.moves = Counter()
        self.accepts = Counter()
        self._grad = None

    def _set(self, phi, ll=None, lp=None):
        self.phi = phi
        self._grad = None
        if lp is None:
            self.lp = ll + self.target.logprior(phi)
            self.ll = ll
        else:
            self.lp = lp
            self.ll = None

    def _count(self, kind, acc):
        self.moves[kind] += 1
        self.accepts[kind] += int(acc)

    def _need_ll(self):
        if self.ll is None:
            self.ll = self.lp - self.target.logprior(self.phi)
        return self.ll

    def prior_imh(self):
        t = self.target
        draw = lambda x, rng: sample_prior(None, t.population, rng, mean=t.mean)
        step = mh_step(self.phi, draw, None, t.safe_loglik, self.rng, logp_state=self._need_ll())
        if step.accepted:
            self._set(step.state, ll=step.log_target)
        self._count("prior_imh", step.accepted)
        return step

    def component(self, adapt: RwmAdaptState):
        any_acc = False
        for j in range(self.target.p):
            s = adapt.scales[j]

            def draw(x, rng, j=j, s=s):
                c = x.copy()
                c[j] += s * rng.standard_normal()
                return c

            step = mh_step(self.phi, draw, None, self.target.safe_logpdf, self.rng, logp_state=self.lp)
            if step.accepted:
                self._set(step.state, lp=step.log_target)
            adapt.update_component(j, step.accepted)
            self._count("rwm_componentwise", step.accepted)
            any_acc |= step.accepted
        return any_acc

    def block(self, adapt: RwmAdaptState):
        s = adapt.block_scales
        draw = lambda x, rng: x + s * rng.standard_normal(x.size)
        step = mh_step(self.phi, draw, None, self.target.safe_logpdf, self.rng, logp_state=self.lp)
        if step.accepted:
            self._set(step.state, lp=step.log_target)
        adapt.update_block(step.accepted)
        self._count("rwm_blockwise", step.accepted)
        return step.accepted

    def mala(self, gamma: float, reverse_drift=True):
        t = self.target
        if self._grad is None:
            try:
                _, self._grad = t.value_and_grad(self.phi)
            except (EvaluationError, DomainError) as exc:
                raise EvaluationError(f"MALA gradient failed at the current state: {exc}") from exc
        gx = self._grad
        cand = self.phi + gamma * gx + math.sqrt(2.0 * gamma) * self.rng.standard_normal(t.p)
        try:
            lp_c, gc = t.value_and_grad(cand)
            ok = math.isfinite(lp_c) and np.all(np.isfinite(gc))
        except (EvaluationError, DomainError, FloatingPointError):
            ok = False
        if ok:
            log_alpha = lp_c - self.lp
            if reverse_drift:
                fwd = cand - self.phi - gamma * gx
                rev = self.phi - cand - gamma * gc
                log_alpha += (fwd @ fwd - rev @ rev) / (4.0 * gamma)
        else:
            log_alpha = -math.inf
        acc = mh_accept(log_alpha, self.rng)
        if acc:
            self._set(cand, lp=lp_c)
            self._grad = gc
        self._count("mala", acc)
        return MHStep(self.phi, acc, self.lp, log_alpha)

    def imh(self, proposal: GaussianProposal):
        step = mh_step(self.phi, lambda x, rng: proposal.sample(rng),
                       lambda to, frm: proposal.logpdf(to), self.target.safe_logpdf,
                       self.rng, logp_state=self.lp)
        if step.accepted:
            self._set(step.state, lp=step.log_target)
        self._count("nlme_imh", step.accepted)
        return step


def _as_target(target_or_individual, model, theta) -> Target:
    if isinstance(target_or_individual, Target):
        return target_or_individual
    if model is None or theta is None:
        raise ConfigError("model and theta are required when passing an individual")
    return ConditionalTarget(target_or_individual, model, theta)


def _rng_for(target, config, rng):
    if rng is not None:
        return rng
    ind = getattr(target, "individual", None)
    return stream(config.seed, "chain", getattr(ind, "id", 0))


def initial_state(target: Target, config: SamplerConfig, rng) -> np.ndarray:
    """Starting point; ``auto`` is the MAP for nlme-IMH and the prior mean otherwise."""
    init = config.init
    if isinstance(init, str) and init == "auto":
        init = "map" if config.kernel == "nlme_imh" else "prior_mean"
    if not isinstance(init, str):
        x = np.asarray(init, dtype=float)
        if x.shape != (target.p,):
            raise ConfigError(f"explicit init must have {target.p} entries")
        return x.copy()
    if init == "prior_mean":
        return target.mean.copy()
    if init == "prior_draw":
        return sample_prior(None, target.population, rng, mean=target.mean)
    return map_estimate(target, tol=config.map_tol, max_iter=config.map_max_iter).phi_hat


def imh_proposal(target: Target, config: SamplerConfig, start=None):
    """MAP + proposal for ``nlme_imh``; ``(None, map)`` when construction fails."""
    mres = None
    try:
        mres = map_estimate(target, init=start, tol=config.map_tol, max_iter=config.map_max_iter)
        if not mres.converged:
            raise ProposalError(f"MAP did not converge (|grad| = {mres.grad_norm:.3g})")
        return build_proposal(target, mres, config.approximation, config.family, config.dof), mres
    except (ProposalError, DomainError, EvaluationError) as exc:
        log.warning("nlme-IMH proposal unavailable, falling back to rwm_cycle: %s", exc)
        return None, mres


def run_chain(target: Target, config: SamplerConfig, rng=None, adapt: RwmAdaptState = None,
              proposal: GaussianProposal = None, init=None, reverse_drift=True) -> ChainTrace:
    """Run ``config.n_iter`` iterations of ``config.kernel`` on ``target``.

    ``proposal`` (nlme-IMH) and ``adapt`` (random walks) may be supplied to
    reuse state across calls; ``init`` overrides ``config.init``.
    """
    rng = _rng_for(target, config, rng)
    kernel = config.kernel
    meta = {}
    start_at_map = init is None and (config.init == "map" or (config.init == "auto" and kernel == "nlme_imh"))
    if kernel == "nlme_imh" and proposal is None:
        start = None if start_at_map else (initial_state(target, config, rng) if init is None else init)
        proposal, mres = imh_proposal(target, config, start=start)
        meta["map"] = mres
        if proposal is None:
            meta["fallback"] = True
            kernel = "rwm_cycle"
            init = target.mean.copy() if start_at_map else start
        elif start_at_map:
            init = mres.phi_hat
        else:
            init = start
    if init is None:
        init = initial_state(target, config, rng)
    phi0 = np.asarray(init, float).copy()
    chain = _Chain(target, phi0, rng)
    if kernel == "nlme_imh":
        meta["proposal"] = proposal
    if kernel.startswith("rwm") and adapt is None:
        adapt = RwmAdaptState.from_population(target.population)
    n = config.n_iter
    samples = np.empty((n, target.p))
    accepted = np.zeros(n, dtype=bool)
    log_target = np.empty(n)
    log_alpha = np.full(n, np.nan)
    for k in range(n):
        if kernel == "nlme_imh":
            step = chain.imh(proposal)
            acc, log_alpha[k] = step.accepted, step.log_alpha
        elif kernel == "prior_imh":
            step = chain.prior_imh()
            acc, log_alpha[k] = step.accepted, step.log_alpha
        elif kernel == "rwm_componentwise":
            acc = chain.component(adapt)
        elif kernel == "rwm_blockwise":
            acc = chain.block(adapt)
        elif kernel == "rwm_cycle":
            acc = chain.prior_imh().accepted
            acc = chain.component(adapt) or acc
            acc = chain.block(adapt) or acc
        else:
            step = chain.mala(config.stepsize, reverse_drift=reverse_drift)
            acc, log_alpha[k] = step.accepted, step.log_alpha
        samples[k] = chain.phi
        accepted[k] = acc
        log_target[k] = chain.lp
    meta.update(moves=dict(chain.moves), accepts=dict(chain.accepts), log_alpha=log_alpha,
                adapt=adapt)
    return ChainTrace(samples, accepted, log_target, [kernel] * n, phi0,
                      target.population.transforms, meta)


def move_acceptance(trace: ChainTrace) -> float:
    """Acceptance rate per elementary MH move (a cycle counts each sub-move)."""
    moves = sum(trace.meta.get("moves", {}).values())
    return sum(trace.meta.get("accepts", {}).values()) / moves if moves else math.nan


def _run(kernel, target_or_individual, model, theta, config, rng, **kw):
    config = config or SamplerConfig(kernel=kernel)
    if config.kernel != kernel:
        config = SamplerConfig(**{**config.__dict__, "kernel": kernel})
    target = _as_target(target_or_individual, model, theta)
    return run_chain(target, config, rng=rng, **kw)


def run_prior_imh(individual, model=None, theta=None, config: SamplerConfig = None, rng=None):
    """Independent MH with proposals from the population distribution."""
    return _run("prior_imh", individual, model, theta, config, rng)


def run_rwm(individual, model=None, theta=None, config: SamplerConfig = None,
            adapt: RwmAdaptState = None, rng=None):
    """Adaptive random walk; ``config.kernel`` selects component/block/cycle (default cycle)."""
    kernel = config.kernel if config is not None and config.kernel.startswith("rwm") else "rwm_cycle"
    return _run(kernel, individual, model, theta, config, rng, adapt=adapt)


def run_mala(individual, model=None, theta=None, config: SamplerConfig = None, rng=None,
             reverse_drift=True):
    """Metropolis-adjusted Langevin with fixed stepsize ``config.stepsize``."""
    return _run("mala", individual, model, theta, config, rng, reverse_drift=reverse_drift)


def run_nlme_imh(individual, model=None, theta=None, config: SamplerConfig = None, rng=None,
                 proposal: GaussianProposal = None):
    """Independent MH with the MAP-centred Laplace/linearized proposal.

    The MAP and proposal are computed once per call (the target is fixed);
    on failure the chain degrades to ``rwm_cycle`` and ``meta['fallback']`` is set.
    """
    return _run("nlme_imh", individual, model, theta, config, rng, proposal=proposal)
