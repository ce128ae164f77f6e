import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import matrix_model
from nlmeimh.errors import ConfigError
from nlmeimh.likelihood import ErrorModel
from nlmeimh.model import IndividualData, PopulationModel, Theta
from nlmeimh.saem import (SaemConfig, SufficientStats, complete_loglik, fsaem_config, fsaem_fit,
                          gamma_schedule, mstep, saem_fit)


def test_gamma_schedule_values():
    assert gamma_schedule(1, 100, 0.7) == 1.0
    assert gamma_schedule(100, 100, 0.7) == 1.0
    assert gamma_schedule(101, 100, 0.7) == 1.0
    assert gamma_schedule(200, 100, 0.7) == pytest.approx(100 ** -0.7)
    assert gamma_schedule(200, 100, 0.7) == pytest.approx(0.0398, abs=5e-5)
    # the decay keeps going past K1 + 100
    assert gamma_schedule(400, 100, 0.7) == pytest.approx(300 ** -0.7)


def test_config_validation():
    with pytest.raises(ConfigError):
        SaemConfig(n_iter=100, burn_len=100)
    with pytest.raises(ConfigError):
        SaemConfig(decay=0.5)
    with pytest.raises(ConfigError):
        SaemConfig(mcmc_transitions=0)
    with pytest.raises(ConfigError):
        SaemConfig(kernel_schedule=[(1, None, "gibbs")])
    with pytest.raises(ConfigError):
        SaemConfig(kernel_schedule=[(2, None, "rwm_cycle")])


def test_schedule_and_transitions():
    cfg = fsaem_config()
    assert [cfg.kernel_at(k) for k in (1, 20, 21, 200)] == ["nlme_imh", "nlme_imh", "rwm_cycle", "rwm_cycle"]
    assert cfg.transitions("nlme_imh") == 1 and cfg.transitions("rwm_cycle") == 5
    assert SaemConfig(mcmc_transitions=3).transitions("nlme_imh") == 3


def template(p=1, diagonal=True, sigma2=1.0, transforms="identity", beta=None):
    pop = PopulationModel(None, np.ones(p), np.eye(p), transforms, beta=beta,
                          omega_structure="diagonal" if diagonal else "full")
    return Theta(pop, ErrorModel.constant(sigma2))


def stats_from(phi, s3=0.0, n_obs=0, X=None):
    phi = np.atleast_2d(np.asarray(phi, float))
    X = np.ones((len(phi), 1)) if X is None else X
    return SufficientStats(X.T @ phi, phi.T @ phi, s3, len(phi), n_obs, X.T @ X, phi)


def test_mstep_examples():
    th = mstep(stats_from([[-1.0], [1.0]]), template())
    assert th.population.psi_pop[0] == pytest.approx(0.0)
    assert th.population.omega[0, 0] == pytest.approx(1.0)
    th = mstep(stats_from([[0.0], [2.0]], s3=10.0, n_obs=20), template())
    assert th.error.sigma2 == pytest.approx(0.5)


def test_mstep_degenerate_floors():
    flags = []
    th = mstep(stats_from([[np.log(3.0)]] * 4, s3=0.0, n_obs=8), template(transforms="log"), flags)
    assert th.population.psi_pop[0] == pytest.approx(3.0)
    assert th.population.omega[0, 0] == pytest.approx(1e-8)
    assert th.error.sigma2 == 1e-12
    assert flags == ["omega_floor", "sigma2_floor"]


def test_mstep_with_covariates():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(40, 1))
    X = np.column_stack([np.ones(40), c])
    phi = 1.0 + 0.5 * c + 0.1 * rng.normal(size=(40, 1))
    th = mstep(stats_from(phi, X=X), template(beta=[[0.0]]))
    coef = np.linalg.lstsq(X, phi, rcond=None)[0]
    assert th.population.psi_pop[0] == pytest.approx(coef[0, 0])
    assert th.population.beta[0, 0] == pytest.approx(coef[1, 0])


@settings(max_examples=50)
@given(st.floats(0.0, 1.0, exclude_min=True), st.integers(0, 2 ** 31))
def test_sa_update_is_convex_combination(gamma, seed):
    rng = np.random.default_rng(seed)
    a, b = stats_from(rng.normal(size=(5, 2)), 3.0, 10), stats_from(rng.normal(size=(5, 2)), 7.0, 10)
    u = a.updated(b, gamma)
    for old, new, mid in ((a.s1, b.s1, u.s1), (a.s2, b.s2, u.s2), (a.s3, b.s3, u.s3)):
        lo, hi = np.minimum(old, new), np.maximum(old, new)
        assert np.all(mid >= lo - 1e-12) and np.all(mid <= hi + 1e-12)
    # s2 - s1 s1' / N stays PSD for averages of genuine statistics
    assert np.linalg.eigvalsh(u.s2 - u.s1.T @ u.s1 / u.n_subjects).min() > -1e-10


def _perturbations(theta, h=1e-3):
    pop, err = theta.population, theta.error
    for j in range(pop.p):
        psi = pop.psi_pop.copy()
        for s in (h, -h):
            psi[j] = pop.psi_pop[j] + s
            yield Theta(pop.replace(psi_pop=psi.copy()), err)
    for j in range(pop.p):
        for k in range(j, pop.p):
            if pop.omega_structure == "diagonal" and j != k:
                continue
            for s in (h, -h):
                om = pop.omega.copy()
                om[j, k] += s
                om[k, j] = om[j, k]
                yield Theta(pop.replace(omega=om), err)
    for s in (h, -h):
        yield Theta(pop, ErrorModel.constant(err.sigma2 + s))


def test_mstep_maximizes_complete_likelihood():
    rng = np.random.default_rng(1)
    for trial in range(50):
        p = int(rng.integers(1, 4))
        full = bool(trial % 2)
        phi = rng.normal(size=(12, p)) @ (np.eye(p) + 0.3 * rng.normal(size=(p, p)))
        s = stats_from(phi, s3=float(rng.uniform(5, 20)), n_obs=30)
        th = mstep(s, template(p, diagonal=not full))
        q0 = complete_loglik(th, s)
        for pert in _perturbations(th):
            assert complete_loglik(pert, s) < q0


def linear_oracle_data(rng, mu=1.0, omega2=0.5, sigma2=0.01, n=2000):
    data = []
    for i in range(2):
        phi = mu + math.sqrt(omega2) * rng.standard_normal()
        y = phi + math.sqrt(sigma2) * rng.standard_normal(n)
        data.append(IndividualData(i + 1, np.arange(1.0, n + 1), y))
    return data


def test_saem_linear_model_reaches_closed_form_mle():
    rng = np.random.default_rng(2)
    data = linear_oracle_data(rng)
    n = data[0].n_obs
    ybar = np.array([d.values.mean() for d in data])
    mu = ybar.mean()
    ssw = sum(((d.values - d.values.mean()) ** 2).sum() for d in data)
    s2 = ssw / (2 * (n - 1))
    w2 = ((ybar - mu) ** 2).mean() - s2 / n
    obs = matrix_model(np.ones((n, 1)), ("x",))
    theta0 = template(sigma2=1.0)
    tr = saem_fit(data, obs, theta0, SaemConfig(kernel_schedule=[(1, None, "nlme_imh")], seed=3))
    fin = tr.final
    assert abs(fin.population.psi_pop[0] - mu) < 1e-3
    assert abs(fin.population.omega[0, 0] - w2) < 1e-3
    assert abs(fin.error.sigma2 - s2) < 1e-3


def test_zero_iterations_leaves_theta(pk_sim):
    cfg, theta, obs, data = pk_sim
    tr = saem_fit(data, obs, theta, SaemConfig(n_iter=0))
    assert len(tr) == 0 and tr.theta.shape == (0, len(theta.names))
    assert tr.final is theta


def test_fsaem_switch_and_determinism(pk_sim, tmp_path):
    cfg, theta, obs, data = pk_sim
    conf = SaemConfig(n_iter=24, burn_len=12, seed=5)
    a = fsaem_fit(data[:8], obs, theta, conf)
    assert a.kernel[:20] == ["nlme_imh"] * 20 and a.kernel[20:] == ["rwm_cycle"] * 4
    b = fsaem_fit(data[:8], obs, theta, conf)
    assert np.array_equal(a.theta, b.theta)
    a.to_csv(tmp_path / "a.csv")
    head = (tmp_path / "a.csv").read_text().splitlines()
    assert head[0] == "iter,gamma,kernel," + ",".join(theta.names)
    assert head[21].split(",")[2] == "rwm_cycle" and head[20].split(",")[2] == "nlme_imh"
    c = saem_fit(data[:8], obs, theta, SaemConfig(n_iter=24, burn_len=12, seed=6))
    assert set(c.kernel) == {"rwm_cycle"} and not np.array_equal(a.theta, c.theta)


def test_unsupported_models_rejected(pk_sim):
    cfg, theta, obs, data = pk_sim
    combined = Theta(theta.population, ErrorModel("combined", (0.1, 0.1)))
    with pytest.raises(ConfigError):
        saem_fit(data, obs, combined, SaemConfig(n_iter=2, burn_len=1))
    student = Theta(theta.population.replace(prior="student", dof=4), theta.error)
    with pytest.raises(ConfigError):
        saem_fit(data, obs, student, SaemConfig(n_iter=2, burn_len=1))
    with pytest.raises(ConfigError):
        saem_fit([], obs, theta)


def test_trace_component_lookup(tte):
    cfg, theta, obs, data = tte
    tr = saem_fit(data[:10], obs, theta, SaemConfig(n_iter=3, burn_len=1))
    assert tr.names == ["lambda_pop", "beta_pop", "omega_lambda", "omega_beta"]
    assert tr.component("beta_pop").shape == (3,)
    with pytest.raises(KeyError):
        tr.component("sigma2")
