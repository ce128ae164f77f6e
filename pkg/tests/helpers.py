"""Shared toy models and oracles for the test-suite."""

import numpy as np
from scipy import integrate, stats

from nlmeimh import dual as ad
from nlmeimh.likelihood import ContinuousModel, ErrorModel, LogDensityTarget
from nlmeimh.model import IndividualData, PopulationModel, Theta
from nlmeimh.models import StructuralModel


def matrix_model(A, names=None):
    """Linear structural model ``f = A psi`` with a fixed design matrix."""
    A = np.asarray(A, float)
    names = names or tuple(f"p{j + 1}" for j in range(A.shape[1]))
    return ContinuousModel(StructuralModel("matrix", tuple(names), lambda t, psi, dose: A @ psi))


def random_linear_problem(rng, p=3, n=10, sigma2=0.3, full=True):
    """Linear-Gaussian individual with a random design and a random SPD Omega."""
    A = rng.normal(size=(n, p))
    L = rng.normal(size=(p, p)) * 0.4 + np.eye(p)
    omega = L @ L.T if full else np.diag(rng.uniform(0.2, 1.5, p))
    m = rng.normal(size=p)
    pop = PopulationModel(tuple(f"p{j + 1}" for j in range(p)), m, omega, "identity",
                          omega_structure="full" if full else "diagonal")
    phi = rng.multivariate_normal(m, omega)
    y = A @ phi + np.sqrt(sigma2) * rng.normal(size=n)
    ind = IndividualData(1, times=np.arange(1.0, n + 1), values=y)
    return A, ind, matrix_model(A), Theta(pop, ErrorModel.constant(sigma2))


# Mildly bimodal 1-D toy target: symmetric two-component likelihood times a
# slightly off-centre Gaussian prior, so the MAP search leaves the saddle.
BIMODAL_MU, BIMODAL_SD, PRIOR_MEAN, PRIOR_SD = 0.6, 0.5, 0.05, 1.5


def bimodal_loglik(phi):
    x = phi[0]
    a = -0.5 * ((x - BIMODAL_MU) / BIMODAL_SD) ** 2
    b = -0.5 * ((x + BIMODAL_MU) / BIMODAL_SD) ** 2
    big = a if float(ad.value(a)) >= float(ad.value(b)) else b
    return big + ad.log(0.5 * ad.exp(a - big) + 0.5 * ad.exp(b - big))


def bimodal_target():
    pop = PopulationModel(("x",), [PRIOR_MEAN], [[PRIOR_SD ** 2]])
    return LogDensityTarget(bimodal_loglik, pop)


def bimodal_density(x):
    return np.exp(float(bimodal_loglik(np.array([x]))) + stats.norm.logpdf(x, PRIOR_MEAN, PRIOR_SD))


def quadrature_bins(density, edges):
    """Bin probabilities (two open tail bins added) by adaptive quadrature."""
    z = integrate.quad(density, -np.inf, np.inf)[0]
    cuts = np.concatenate([[-np.inf], edges, [np.inf]])
    return np.array([integrate.quad(density, a, b)[0] for a, b in zip(cuts[:-1], cuts[1:])]) / z


def total_variation(samples, edges, probs):
    cuts = np.concatenate([[-np.inf], edges, [np.inf]])
    freq = np.histogram(samples, cuts)[0] / len(samples)
    return 0.5 * np.abs(freq - probs).sum()


def fd_gradient(f, x, h=1e-6):
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h * max(1.0, abs(x[j]))
        g[j] = (f(x + e) - f(x - e)) / (2 * e[j])
    return g
