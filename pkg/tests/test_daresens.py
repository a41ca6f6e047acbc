# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

import time

import numpy as np
import pytest

from lqrinfluence.daresens import (
    design_lqr,
    dresidual_dtheta,
    dresidual_dtheta_expanded,
    forward_sensitivity,
    frechet_T,
    grad_J_adjoint,
    grad_J_forward,
    if2_score,
    nominal_cost,
)
from lqrinfluence.errors import AssumptionViolated, DataError
from lqrinfluence.ident import ParamVector, fit_ridge, traj_gradient
from lqrinfluence.lyapriccati import NonStabilizable, dare_residual, solve_dlyap_t
from testlib.datasets import random_dataset
from testlib.oracles import (
    central_difference,
    random_spd,
    random_stabilizable,
    random_stable,
    random_symmetric,
    scalar_dare_bisection,
)


def random_design(rng, n_x, n_u, sigma0=None):
    A, B = random_stabilizable(rng, n_x, n_u)
    theta = ParamVector.from_matrices(A, B)
    if sigma0 is None:
        sigma0 = random_spd(rng, n_x)
    return design_lqr(theta, np.eye(n_x), 0.1 * np.eye(n_u), sigma0)


def relative_error(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


class TestDesignLqr:
    def test_zero_dynamics(self):
        theta = ParamVector.from_matrices(np.zeros((2, 2)), np.eye(2))
        design = design_lqr(theta, np.eye(2), np.eye(2), np.eye(2))
        np.testing.assert_allclose(design.P0, np.eye(2), atol=1e-14)
        np.testing.assert_allclose(design.K0, 0.0, atol=1e-14)
        np.testing.assert_allclose(design.A_cl, 0.0, atol=1e-14)
        np.testing.assert_allclose(design.Lambda, np.eye(2), atol=1e-14)
        assert design.J == pytest.approx(2.0, abs=1e-13)

    def test_zero_input_is_lyapunov_cost(self):
        rng = np.random.default_rng(11)
        A = random_stable(rng, 3, rho=0.8)
        Sigma0 = random_spd(rng, 3)
        theta = ParamVector.from_matrices(A, np.zeros((3, 1)))
        design = design_lqr(theta, np.eye(3), np.eye(1), Sigma0)
        X = solve_dlyap_t(A, np.eye(3))
        assert design.J == pytest.approx(float(np.trace(X @ Sigma0)), rel=1e-11)

    def test_scalar_cost(self):
        theta = ParamVector.from_matrices(np.array([[0.9]]), np.array([[1.0]]))
        design = design_lqr(theta, np.array([[1.0]]), np.array([[0.1]]), np.array([[2.0]]))
        expected = scalar_dare_bisection(0.9, 1.0, 1.0, 0.1)
        assert design.J == pytest.approx(2.0 * expected, abs=1e-11)

    def test_adjoint_gramian(self):
        rng = np.random.default_rng(12)
        design = random_design(rng, 4, 2)
        Lambda = design.Lambda
        residual = Lambda - design.A_cl @ Lambda @ design.A_cl.T - design.Sigma0
        assert np.linalg.norm(residual) <= 1e-10 * max(1.0, np.linalg.norm(Lambda))
        assert np.linalg.eigvalsh(Lambda).min() >= -1e-12 * np.abs(Lambda).max()

    def test_closed_loop_form(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            n_x = int(rng.integers(1, 7))
            design = random_design(rng, n_x, int(rng.integers(1, n_x + 1)))
            P, K, A_cl = design.P0, design.K0, design.A_cl
            closed_loop = design.Q + A_cl.T @ P @ A_cl + K.T @ design.R @ K
            assert np.linalg.norm(P - closed_loop) <= 1e-10 * max(1.0, np.linalg.norm(P))

    def test_nominal_cost_matches_design(self):
        rng = np.random.default_rng(14)
        design = random_design(rng, 3, 1)
        J = nominal_cost(design.theta, design.Q, design.R, design.Sigma0)
        assert J == pytest.approx(design.J, rel=1e-14)

    def test_not_stabilizable(self):
        theta = ParamVector.from_matrices(np.diag([1.5, 0.5]), np.array([[0.0], [1.0]]))
        with pytest.raises(AssumptionViolated) as excinfo:
            design_lqr(theta, np.eye(2), np.eye(1), np.eye(2))
        assert isinstance(excinfo.value, NonStabilizable)
        assert excinfo.value.exit_code == 5

    def test_bad_sigma0(self):
        theta = ParamVector.from_matrices(np.zeros((2, 2)), np.eye(2))
        with pytest.raises(DataError):
            design_lqr(theta, np.eye(2), np.eye(2), np.eye(3))
        with pytest.raises(DataError):
            design_lqr(theta, np.eye(2), np.eye(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(DataError):
            design_lqr(theta, np.eye(2), np.eye(2), -np.eye(2))


class TestFrechetT:
    def test_zero_closed_loop(self):
        dP = random_symmetric(np.random.default_rng(0), 3)
        np.testing.assert_allclose(frechet_T(np.zeros((3, 3)), dP), dP)

    def test_zero_direction(self):
        A_cl = random_stable(np.random.default_rng(1), 3)
        np.testing.assert_array_equal(frechet_T(A_cl, np.zeros((3, 3))), np.zeros((3, 3)))

    def test_directional_derivative_of_residual(self):
        rng = np.random.default_rng(15)
        design = random_design(rng, 3, 2)
        A, B, Q, R = design.A, design.B, design.Q, design.R
        dP = random_symmetric(rng, 3)
        eps = 1e-6
        fd = (
            dare_residual(design.P0 + eps * dP, A, B, Q, R)
            - dare_residual(design.P0 - eps * dP, A, B, Q, R)
        ) / (2 * eps)
        expected = frechet_T(design.A_cl, dP)
        assert np.linalg.norm(fd - expected) <= 1e-6 * max(1.0, np.linalg.norm(expected))


class TestDresidual:
    def test_symmetric(self):
        design = random_design(np.random.default_rng(16), 3, 2)
        for m in range(design.p):
            dR = dresidual_dtheta(design, m)
            np.testing.assert_array_equal(dR, dR.T)

    def test_input_coordinates_vanish_without_feedback(self):
        # stable A with Q = 0 gives P0 = 0 and K0 = 0
        rng = np.random.default_rng(17)
        theta = ParamVector.from_matrices(random_stable(rng, 3, rho=0.7), rng.standard_normal((3, 2)))
        design = design_lqr(theta, np.zeros((3, 3)), np.eye(2), np.eye(3))
        np.testing.assert_allclose(design.P0, 0.0, atol=1e-14)
        for m in range(design.p):
            np.testing.assert_allclose(dresidual_dtheta(design, m), 0.0, atol=1e-14)

    def test_out_of_range(self):
        design = random_design(np.random.default_rng(18), 2, 1)
        with pytest.raises(IndexError):
            dresidual_dtheta(design, design.p)
        with pytest.raises(IndexError):
            dresidual_dtheta(design, -1)

    def test_matches_residual_finite_difference(self):
        rng = np.random.default_rng(19)
        design = random_design(rng, 3, 2)
        P, Q, R = design.P0, design.Q, design.R
        theta = design.theta
        eps = 1e-6
        for m in range(design.p):
            step = np.zeros(design.p)
            step[m] = eps
            A_hi, B_hi = theta.shifted(step).matrices()
            A_lo, B_lo = theta.shifted(-step).matrices()
            fd = (dare_residual(P, A_hi, B_hi, Q, R) - dare_residual(P, A_lo, B_lo, Q, R)) / (2 * eps)
            expected = dresidual_dtheta(design, m)
            assert np.linalg.norm(fd - expected) <= 1e-5 * max(1.0, np.linalg.norm(expected))

    def test_indexed_dense_and_expanded_agree(self):
        rng = np.random.default_rng(20)
        for _ in range(100):
            n_x = int(rng.integers(1, 6))
            design = random_design(rng, n_x, int(rng.integers(1, n_x + 1)))
            loop = np.linalg.norm(design.A) + np.linalg.norm(design.B) * np.linalg.norm(design.K0)
            scale = max(1.0, np.linalg.norm(design.P0)) * max(1.0, loop) ** 2
            for m in range(design.p):
                compact = dresidual_dtheta(design, m)
                dense = dresidual_dtheta(design, m, dense=True)
                expanded = dresidual_dtheta_expanded(design, m)
                assert np.linalg.norm(compact - dense) <= 1e-12 * scale
                assert np.linalg.norm(compact - expanded) <= 1e-12 * scale

    def test_closed_loop_identity(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            n_x = int(rng.integers(1, 8))
            n_u = int(rng.integers(1, 4))
            A = rng.standard_normal((n_x, n_x))
            B = rng.standard_normal((n_x, n_u))
            K = rng.standard_normal((n_u, n_x))
            dP = random_symmetric(rng, n_x)
            A_cl = A - B @ K
            lhs = A.T @ dP @ B @ K + K.T @ B.T @ dP @ A - K.T @ B.T @ dP @ B @ K
            rhs = A.T @ dP @ A - A_cl.T @ dP @ A_cl
            loop = np.linalg.norm(A) + np.linalg.norm(B) * np.linalg.norm(K)
            scale = np.linalg.norm(dP) * max(1.0, loop) ** 2
            assert np.linalg.norm(lhs - rhs) <= 1e-12 * scale


def scalar_dp_da(a, b, q, r):
    """Implicit-function derivative of the scalar DARE root in ``a``."""
    p = scalar_dare_bisection(a, b, q, r)
    s = r + b * b * p
    f_a = 2 * a * p - 2 * a * b * b * p * p / s
    f_p = a * a - a * a * b * b * (2 * p * s - b * b * p * p) / (s * s) - 1.0
    return -f_a / f_p


class TestForwardSensitivity:
    def test_zero_residual_derivative(self):
        theta = ParamVector.from_matrices(np.zeros((2, 2)), np.eye(2))
        design = design_lqr(theta, np.eye(2), np.eye(2), np.eye(2))
        for m in range(design.p):
            np.testing.assert_allclose(forward_sensitivity(design, m), 0.0, atol=1e-14)

    def test_scalar_implicit_derivative(self):
        theta = ParamVector.from_matrices(np.array([[0.9]]), np.array([[1.0]]))
        design = design_lqr(theta, np.array([[1.0]]), np.array([[0.1]]), np.array([[1.0]]))
        S = forward_sensitivity(design, 0)
        assert S[0, 0] == pytest.approx(scalar_dp_da(0.9, 1.0, 1.0, 0.1), rel=1e-9)

    def test_cost_finite_difference(self):
        rng = np.random.default_rng(22)
        design = random_design(rng, 3, 1)
        eps = 1e-5

        def cost(theta):
            return nominal_cost(
                ParamVector(theta=theta, n_x=3, n_u=1), design.Q, design.R, design.Sigma0
            )

        fd = central_difference(cost, design.theta.theta, eps=eps)
        forward = np.array(
            [np.sum(forward_sensitivity(design, m) * design.Sigma0) for m in range(design.p)]
        )
        assert relative_error(forward, fd) <= 1e-4


class TestGradient:
    def test_zero_sigma0(self):
        rng = np.random.default_rng(23)
        design = random_design(rng, 3, 2, sigma0=np.zeros((3, 3)))
        np.testing.assert_allclose(design.Lambda, 0.0, atol=1e-14)
        np.testing.assert_allclose(grad_J_adjoint(design).grad, 0.0, atol=1e-14)
        np.testing.assert_allclose(grad_J_forward(design).grad, 0.0, atol=1e-14)

    def test_zero_closed_loop(self):
        theta = ParamVector.from_matrices(np.zeros((2, 2)), np.eye(2))
        design = design_lqr(theta, np.eye(2), np.eye(2), np.eye(2))
        np.testing.assert_allclose(grad_J_adjoint(design).grad, 0.0, atol=1e-14)
        np.testing.assert_allclose(grad_J_forward(design).grad, 0.0, atol=1e-14)

    def test_method_labels(self):
        design = random_design(np.random.default_rng(24), 2, 1)
        assert grad_J_adjoint(design).method == "adjoint"
        assert grad_J_forward(design).method == "forward"

    def test_forward_adjoint_duality(self):
        rng = np.random.default_rng(25)
        for _ in range(100):
            n_x = int(rng.integers(2, 11))
            n_u = int(rng.integers(1, 4))
            design = random_design(rng, n_x, n_u)
            adjoint = grad_J_adjoint(design).grad
            forward = grad_J_forward(design).grad
            assert np.all(np.isfinite(adjoint))
            assert np.max(np.abs(adjoint - forward)) <= 1e-9 * max(1.0, np.max(np.abs(forward)))

    def test_dense_adjoint_matches_indexed(self):
        rng = np.random.default_rng(26)
        design = random_design(rng, 4, 2)
        np.testing.assert_allclose(
            grad_J_adjoint(design, dense=True).grad,
            grad_J_adjoint(design).grad,
            rtol=1e-10,
            atol=1e-12,
        )

    def test_threaded_forward_matches(self):
        design = random_design(np.random.default_rng(27), 4, 2)
        np.testing.assert_array_equal(
            grad_J_forward(design, threads=4).grad, grad_J_forward(design).grad
        )

    @pytest.mark.parametrize("n_x, n_u", [(2, 1), (3, 2), (4, 2)])
    def test_matches_cost_finite_difference(self, n_x, n_u):
        rng = np.random.default_rng(n_x * 10 + n_u)
        design = random_design(rng, n_x, n_u)

        def cost(theta):
            return nominal_cost(
                ParamVector(theta=theta, n_x=n_x, n_u=n_u), design.Q, design.R, design.Sigma0
            )

        fd = central_difference(cost, design.theta.theta, eps=1e-5)
        assert relative_error(grad_J_adjoint(design).grad, fd) <= 1e-4

    def test_call_counts(self, metricsmock):
        design = random_design(np.random.default_rng(28), 3, 2)
        with metricsmock as mm:
            grad_J_adjoint(design)

        assert mm.filter_records("incr", stat="lqrinfluence.lyapriccati.forward_lyapunov_solve") == []
        assert mm.filter_records("incr", stat="lqrinfluence.lyapriccati.adjoint_lyapunov_solve") == []
        records = mm.filter_records("incr", stat="lqrinfluence.daresens.trace_assembly")
        assert [record.value for record in records] == [design.p]

        with metricsmock as mm:
            grad_J_forward(design)

        forward = mm.filter_records("incr", stat="lqrinfluence.lyapriccati.forward_lyapunov_solve")
        assert len(forward) == design.p

    def test_design_uses_one_adjoint_solve(self, metricsmock):
        rng = np.random.default_rng(29)
        with metricsmock as mm:
            random_design(rng, 3, 2)

        adjoint = mm.filter_records("incr", stat="lqrinfluence.lyapriccati.adjoint_lyapunov_solve")
        assert len(adjoint) == 1

    @pytest.mark.slow
    def test_adjoint_is_cheaper(self):
        design = random_design(np.random.default_rng(30), 10, 4)
        assert design.p == 140

        def median_seconds(fun):
            samples = []
            for _ in range(20):
                start = time.perf_counter()
                fun(design)
                samples.append(time.perf_counter() - start)
            return float(np.median(samples))

        assert median_seconds(grad_J_adjoint) <= median_seconds(grad_J_forward)


class TestIf2Score:
    def test_zero_gradient_of_cost(self):
        rng = np.random.default_rng(31)
        data, _, _ = random_dataset(rng, n_x=2, n_u=1, N=4)
        fit = fit_ridge(data, 1e-5)
        design = design_lqr(fit.theta_hat, np.eye(2), 0.1 * np.eye(1), np.zeros((2, 2)))
        grad = grad_J_adjoint(design)
        for tau in data:
            assert if2_score(fit, tau, grad) == 0.0

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(32)
        data, _, _ = random_dataset(rng, n_x=3, n_u=2, N=6)
        fit = fit_ridge(data, 1e-5)
        design = design_lqr(fit.theta_hat, np.eye(3), 0.1 * np.eye(2), np.eye(3))
        grad = grad_J_adjoint(design)
        v = np.linalg.solve(fit.hessian, grad.grad)
        for tau in data:
            expected = float(traj_gradient(fit, tau) @ v)
            assert if2_score(fit, tau, grad) == pytest.approx(expected, rel=1e-8, abs=1e-12)

    def test_custom_inverse_hvp(self):
        rng = np.random.default_rng(33)
        data, _, _ = random_dataset(rng, n_x=2, n_u=1, N=3)
        fit = fit_ridge(data, 1e-5)
        design = design_lqr(fit.theta_hat, np.eye(2), 0.1 * np.eye(1), np.eye(2))
        grad = grad_J_adjoint(design)
        tau = data.trajectories[0]
        assert if2_score(fit, tau, grad, inverse_hvp=lambda v: np.zeros_like(v)) == 0.0

    def test_predicts_retrained_cost_change(self):
        rng = np.random.default_rng(34)
        data, _, _ = random_dataset(rng, n_x=2, n_u=1, N=40, T=25, sigma=0.03)
        fit = fit_ridge(data, 1e-5)
        Q, R, Sigma0 = np.eye(2), 0.1 * np.eye(1), np.eye(2)
        design = design_lqr(fit.theta_hat, Q, R, Sigma0)
        grad = grad_J_adjoint(design)

        predicted = []
        truth = []
        for tau in data:
            predicted.append(if2_score(fit, tau, grad))
            refit = fit_ridge(data.without(tau.id), 1e-5)
            truth.append(nominal_cost(refit.theta_hat, Q, R, Sigma0) - design.J)
        assert np.corrcoef(predicted, truth)[0, 1] >= 0.99
