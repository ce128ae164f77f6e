import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_gradient, matrix_model, random_linear_problem
from nlmeimh.errors import DomainError, EvaluationError
from nlmeimh.likelihood import (ConditionalTarget, ContinuousModel, ErrorModel, TimeToEventModel, adaptive_simpson,
                                cont_loglik, cumulative_hazard, grad_joint, hess_joint, joint_logpdf,
                                joint_logpdf_psi, tte_loglik)
from nlmeimh.model import IndividualData, PopulationModel, Theta, log_abs_jacobian, prior_logpdf
from nlmeimh.models import PK1_ORAL, WEIBULL, HazardModel, StructuralModel, weibull_hazard

LOG2PI = math.log(2 * math.pi)
CONST = StructuralModel("const", ("c",), lambda t, psi, dose: psi[0] + 0.0 * t)
WEIBULL_QUAD = HazardModel("weibull-quad", ("lambda", "beta"), weibull_hazard)


def test_cont_loglik_examples():
    ind = IndividualData(1, [1.0, 2.0], [3.0, 3.0])
    assert cont_loglik([3.0], ind, CONST, ErrorModel.constant(1.0)) == pytest.approx(-LOG2PI, abs=1e-14)
    one = IndividualData(1, [1.0], [4.0])
    assert cont_loglik([3.0], one, CONST, ErrorModel.constant(1.0)) == pytest.approx(
        -0.5 * LOG2PI - 0.5, abs=1e-14)
    prop = IndividualData(1, [1.0], [2.0])
    assert cont_loglik([2.0], prop, CONST, ErrorModel("proportional", (0.5,))) == pytest.approx(
        -0.5 * LOG2PI, abs=1e-14)


def test_combined_error_matches_direct_formula():
    ind = IndividualData(1, [1.0, 2.0, 3.0], [1.0, 2.5, 2.0])
    err = ErrorModel("combined", (0.3, 0.2))
    f = 2.0
    g = 0.3 + 0.2 * f
    expected = sum(-0.5 * math.log(2 * math.pi * g * g) - (y - f) ** 2 / (2 * g * g) for y in (1.0, 2.5, 2.0))
    assert cont_loglik([f], ind, CONST, err) == pytest.approx(expected, rel=1e-13)


def test_error_model_validation():
    with pytest.raises(DomainError):
        ErrorModel.constant(0.0)
    with pytest.raises(DomainError):
        ErrorModel("combined", (0.0, 0.0))
    with pytest.raises(DomainError):
        ErrorModel("combined", (-0.1, 1.0))
    with pytest.raises(DomainError):
        ErrorModel("weird", (1.0,))


def test_structural_failure_reports_index():
    ind = IndividualData(1, [0.5, 1.0], [1.0, 1.0], dose=100.0)
    with pytest.raises(EvaluationError) as info:
        cont_loglik([800.0, 2.0, -2.0], ind, PK1_ORAL, ErrorModel.constant(1.0), "log")
    assert info.value.index == 0


def test_tte_loglik_examples():
    none = IndividualData(1, event_times=[], tau_c=20.0)
    assert tte_loglik(np.log([10.0, 3.0]), none, WEIBULL, "log") == pytest.approx(-8.0, abs=1e-12)
    one = IndividualData(1, event_times=[5.0], tau_c=20.0)
    assert tte_loglik(np.log([10.0, 1.0]), one, WEIBULL, "log") == pytest.approx(math.log(0.1) - 2.0,
                                                                                 abs=1e-12)
    empty = IndividualData(1, event_times=[], tau_c=0.0)
    assert tte_loglik(np.log([10.0, 3.0]), empty, WEIBULL, "log") == 0.0


def test_tte_nonpositive_hazard_raises():
    flat = HazardModel("zero", ("a",), lambda t, psi: 0.0 * t * psi[0])
    with pytest.raises(EvaluationError):
        tte_loglik([1.0], IndividualData(1, event_times=[2.0], tau_c=5.0), flat)


def test_adaptive_simpson_exact_cases():
    assert adaptive_simpson(lambda u: u ** 3, 0.0, 2.0) == pytest.approx(4.0, abs=1e-12)
    assert adaptive_simpson(math.exp, 0.0, 1.0) == pytest.approx(math.e - 1, abs=1e-10)
    assert adaptive_simpson(math.exp, 1.0, 1.0) == 0.0


def test_weibull_quadrature_matches_closed_form():
    rng = np.random.default_rng(4)
    for _ in range(100):
        lam, beta, tau = rng.uniform(2, 20), rng.uniform(1, 5), rng.uniform(0.5, 30)
        psi = np.array([lam, beta])
        closed = cumulative_hazard(WEIBULL, tau, psi)
        quad = cumulative_hazard(WEIBULL_QUAD, tau, psi)
        assert abs(quad - closed) < 1e-8
        ind = IndividualData(1, event_times=np.sort(rng.uniform(0, tau, 3)), tau_c=tau)
        phi = np.log(psi)
        assert abs(tte_loglik(phi, ind, WEIBULL_QUAD, "log") - tte_loglik(phi, ind, WEIBULL, "log")) < 1e-8


def test_joint_is_sum_of_parts():
    rng = np.random.default_rng(5)
    pop = PopulationModel.diagonal(("ka", "V", "k"), [1, 8, 0.1], [0.5, 0.2, 0.3])
    theta = Theta(pop, ErrorModel.constant(0.5))
    obs = ContinuousModel(PK1_ORAL)
    ind = IndividualData(1, [0.5, 1, 2, 4, 8, 24], rng.normal(5, 1, 6), dose=100.0)
    for _ in range(100):
        phi = pop.phi_pop + 0.3 * rng.normal(size=3)
        ref = cont_loglik(phi, ind, PK1_ORAL, theta.error, "log") + prior_logpdf(phi, ind, pop)
        assert joint_logpdf(phi, ind, obs, theta) == pytest.approx(ref, abs=1e-14 * max(1, abs(ref)))
    psi = np.exp(phi)
    assert joint_logpdf_psi(psi, ind, obs, theta) == pytest.approx(
        joint_logpdf(phi, ind, obs, theta) + log_abs_jacobian(psi, "log"), rel=1e-14)


def test_joint_decreases_in_prior_tails():
    pop = PopulationModel(("x",), [0.0], [[1.0]])
    theta = Theta(pop, ErrorModel.constant(1.0))
    flat = ContinuousModel(StructuralModel("flat", ("x",), lambda t, psi, dose: 0.0 * t))
    ind = IndividualData(1, [1.0], [0.0])
    vals = [joint_logpdf([r], ind, flat, theta) for r in (0, 1, 2, 4, 8)]
    assert np.all(np.diff(vals) < 0)


def test_linear_gradient_and_hessian_by_hand():
    rng = np.random.default_rng(6)
    A, ind, obs, theta = random_linear_problem(rng)
    pop, s2 = theta.population, theta.error.sigma2
    oinv = np.linalg.inv(pop.omega)
    for _ in range(10):
        phi = rng.normal(size=3)
        ev = hess_joint(phi, ind, obs, theta)
        grad = A.T @ (ind.values - A @ phi) / s2 - oinv @ (phi - pop.phi_pop)
        np.testing.assert_allclose(ev.gradient, grad, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(ev.hessian, -A.T @ A / s2 - oinv, rtol=1e-8, atol=1e-8)
        assert np.abs(ev.hessian - ev.hessian.T).max() < 1e-8


def test_pure_prior_hessian():
    pop = PopulationModel(None, [0.0, 1.0], [[1.0, 0.3], [0.3, 2.0]], omega_structure="full")
    theta = Theta(pop, ErrorModel.constant(1.0))
    flat = ContinuousModel(StructuralModel("flat", ("a", "b"), lambda t, psi, dose: 0.0 * t))
    ev = hess_joint([0.3, -0.2], IndividualData(1, [1.0], [0.0]), flat, theta)
    np.testing.assert_allclose(ev.hessian, -np.linalg.inv(pop.omega), atol=1e-8)


def test_hessian_is_likelihood_part_minus_omega_inverse():
    rng = np.random.default_rng(7)
    pop = PopulationModel.diagonal(("ka", "V", "k"), [1, 8, 0.1], [0.5, 0.2, 0.3])
    theta = Theta(pop, ErrorModel.constant(0.5))
    ind = IndividualData(1, [0.5, 1, 2, 4, 8, 24], rng.normal(5, 1, 6), dose=100.0)
    tgt = ConditionalTarget(ind, ContinuousModel(PK1_ORAL), theta)
    phi = pop.phi_pop + 0.1
    np.testing.assert_allclose(tgt.hessian(phi), tgt.hessian(phi, loglik_only=True) - pop.omega_inv,
                               atol=1e-8)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


def test_gradient_matches_finite_differences_pk():
    rng = np.random.default_rng(8)
    pop = PopulationModel.diagonal(("ka", "V", "k"), [1, 8, 0.1], [0.5, 0.2, 0.3])
    theta = Theta(pop, ErrorModel.constant(0.5))
    obs = ContinuousModel(PK1_ORAL)
    worst = 0.0
    for _ in range(100):
        t = np.sort(rng.choice([0.5, 1, 2, 4, 8, 12, 24, 48], 6, replace=False))
        ind = IndividualData(1, t, rng.normal(5, 2, 6), dose=100.0)
        phi = pop.phi_pop + 0.4 * rng.normal(size=3)
        g = grad_joint(phi, ind, obs, theta).gradient
        fd = fd_gradient(lambda x: joint_logpdf(x, ind, obs, theta), phi)
        worst = max(worst, _rel_err(g, fd))
    assert worst < 1e-5


def test_gradient_matches_finite_differences_tte():
    rng = np.random.default_rng(9)
    pop = PopulationModel.diagonal(("lambda", "beta"), [10, 3], [0.3, 0.3])
    theta = Theta(pop)
    obs = TimeToEventModel(WEIBULL)
    worst = 0.0
    for _ in range(100):
        ind = IndividualData(1, event_times=np.sort(rng.uniform(0.5, 20, rng.integers(0, 6))), tau_c=20.0)
        phi = pop.phi_pop + 0.3 * rng.normal(size=2)
        g = grad_joint(phi, ind, obs, theta).gradient
        fd = fd_gradient(lambda x: joint_logpdf(x, ind, obs, theta), phi)
        worst = max(worst, _rel_err(g, fd))
    assert worst < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_gradient_linear_matrix_model(a, b):
    A = np.array([[1.0, 0.5], [0.2, -1.0], [2.0, 0.0]])
    pop = PopulationModel(None, [0.0, 0.0], np.eye(2))
    theta = Theta(pop, ErrorModel.constant(0.7))
    ind = IndividualData(1, [1.0, 2.0, 3.0], [0.3, -0.2, 1.0])
    obs = matrix_model(A)
    g = grad_joint([a, b], ind, obs, theta).gradient
    np.testing.assert_allclose(g, fd_gradient(lambda x: joint_logpdf(x, ind, obs, theta), [a, b]),
                               rtol=1e-6, atol=1e-6)
