# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
Sensitivity of the LQR design cost ``J(theta) = Tr(P(theta) Sigma0)`` to the
identified parameters, differentiating through the DARE.

Perturbing coordinate ``m`` of ``theta`` (row ``i``, column ``j`` of ``[A B]``)
moves the closed loop by ``dA_cl = e_i c^T`` where ``c = e_j`` for an ``A``
entry and ``c = -K^T e_{j - n_x}`` for a ``B`` entry. The residual derivative
at fixed ``P`` is then::

    dR_m = -(dA_cl^T P A_cl + A_cl^T P dA_cl)

The forward sensitivity solves ``S_m - A_cl^T S_m A_cl = -dR_m`` (one Lyapunov
solve per coordinate). The adjoint route solves ``L - A_cl L A_cl^T = Sigma0``
once and reads every coordinate off ``W = P A_cl L``::

    dJ/dA = 2 W        dJ/dB = -2 W K^T

"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging

import numpy as np

from lqrinfluence.errors import AssumptionViolated, DataError
from lqrinfluence.ident import ParamVector, influence_dot, traj_gradient
from lqrinfluence.libmarkus import METRICS
from lqrinfluence.lyapriccati import (
    DEFAULT_OPTIONS,
    solve_dare,
    solve_dlyap_adj,
    solve_dlyap_t,
    symmetrize,
)


LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LqrDesign:
    """Nominal LQR design at ``theta`` plus the adjoint Gramian."""

    theta: ParamVector
    Q: np.ndarray
    R: np.ndarray
    Sigma0: np.ndarray
    dare: object
    Lambda: np.ndarray

    @property
    def n_x(self):
        return self.theta.n_x

    @property
    def n_u(self):
        return self.theta.n_u

    @property
    def p(self):
        return self.theta.p

    @property
    def A(self):
        return self.theta.matrices()[0]

    @property
    def B(self):
        return self.theta.matrices()[1]

    @property
    def P0(self):
        return self.dare.P

    @property
    def K0(self):
        return self.dare.K

    @property
    def A_cl(self):
        return self.dare.A_cl

    @property
    def M0(self):
        return self.dare.M

    @property
    def J(self):
        return float(np.trace(self.dare.P @ self.Sigma0))


@dataclass(frozen=True, eq=False)
class CostGradient:
    grad: np.ndarray
    method: str


def _check_sigma0(Sigma0, n_x):
    Sigma0 = np.asarray(Sigma0, dtype=np.float64)
    if Sigma0.shape != (n_x, n_x):
        raise DataError(f"Sigma0 has shape {Sigma0.shape}, expected ({n_x}, {n_x})")
    if np.max(np.abs(Sigma0 - Sigma0.T), initial=0.0) > 1e-12 * max(
        1.0, np.max(np.abs(Sigma0))
    ):
        raise DataError("Sigma0 is not symmetric")
    Sigma0 = symmetrize(Sigma0)
    if np.linalg.eigvalsh(Sigma0).min() < -1e-12 * max(1.0, np.max(np.abs(Sigma0))):
        raise DataError("Sigma0 is not positive semidefinite")
    return Sigma0


def _solve_stabilizing(theta, Q, R, options):
    A, B = theta.matrices()
    dare = solve_dare(A, B, Q, R, options)
    margin = options.stability_margin
    if dare.rho_cl >= 1.0 - margin:
        raise AssumptionViolated(
            f"closed loop is not Schur stable (rho {dare.rho_cl:.6g})", rho=dare.rho_cl
        )
    return dare


def design_lqr(theta, Q, R, Sigma0, options=None):
    """Solve the DARE at ``theta`` and the adjoint Lyapunov equation.

    :arg theta: :py:class:`lqrinfluence.ident.ParamVector`
    :arg Q: state weight
    :arg R: input weight
    :arg Sigma0: initial-state covariance
    :arg options: :py:class:`lqrinfluence.lyapriccati.SolverOptions`

    :returns: :py:class:`LqrDesign`

    :raises NonStabilizable: when the identified model can't be stabilized

    """
    options = options or DEFAULT_OPTIONS
    Sigma0 = _check_sigma0(Sigma0, theta.n_x)
    dare = _solve_stabilizing(theta, Q, R, options)
    Lambda = solve_dlyap_adj(dare.A_cl, Sigma0, options.stability_margin)
    LOGGER.debug(
        "lqr design rho_cl=%.6f J=%.6g dare=%s/%d",
        dare.rho_cl,
        float(np.trace(dare.P @ Sigma0)),
        dare.method,
        dare.iterations,
    )
    return LqrDesign(
        theta=theta,
        Q=np.asarray(Q, dtype=np.float64),
        R=np.asarray(R, dtype=np.float64),
        Sigma0=Sigma0,
        dare=dare,
        Lambda=Lambda,
    )


def nominal_cost(theta, Q, R, Sigma0, options=None):
    """Return ``J = Tr(P Sigma0)`` at ``theta`` without the adjoint solve."""
    options = options or DEFAULT_OPTIONS
    dare = _solve_stabilizing(theta, Q, R, options)
    return float(np.trace(dare.P @ np.asarray(Sigma0, dtype=np.float64)))


def frechet_T(A_cl, dP):
    """Fréchet derivative of the DARE residual in ``P``: ``dP - A_cl^T dP A_cl``."""
    return symmetrize(dP - A_cl.T @ dP @ A_cl)


def _coordinate(design, m):
    if not 0 <= m < design.p:
        raise IndexError(f"coordinate {m} out of range for p={design.p}")
    d = design.n_x + design.n_u
    return m // d, m % d


def _closed_loop_direction(design, j):
    """Return ``c`` such that perturbing ``(i, j)`` moves ``A_cl`` by ``e_i c^T``."""
    if j < design.n_x:
        c = np.zeros(design.n_x)
        c[j] = 1.0
        return c
    return -design.K0[j - design.n_x, :]


def _basis_matrices(design, m):
    i, j = _coordinate(design, m)
    dA = np.zeros((design.n_x, design.n_x))
    dB = np.zeros((design.n_x, design.n_u))
    if j < design.n_x:
        dA[i, j] = 1.0
    else:
        dB[i, j - design.n_x] = 1.0
    return dA, dB


def dresidual_dtheta(design, m, dense=False):
    """Return the derivative of the DARE residual in ``theta_m`` at fixed ``P``.

    :arg dense: build the basis matrices explicitly instead of indexing

    """
    P, A_cl = design.P0, design.A_cl
    if dense:
        dA, dB = _basis_matrices(design, m)
        dA_cl = dA - dB @ design.K0
        return symmetrize(-(dA_cl.T @ P @ A_cl + A_cl.T @ P @ dA_cl))

    i, j = _coordinate(design, m)
    c = _closed_loop_direction(design, j)
    r = A_cl.T @ P[:, i]
    return symmetrize(-(np.outer(c, r) + np.outer(r, c)))


def dresidual_dtheta_expanded(design, m):
    """Product-rule expansion of :py:func:`dresidual_dtheta` in ``A``, ``B``, ``K``.

    Kept for the algebraic equivalence check.

    """
    dA, dB = _basis_matrices(design, m)
    A, B, K, P = design.A, design.B, design.K0, design.P0
    return symmetrize(
        -dA.T @ P @ A
        - A.T @ P @ dA
        + A.T @ P @ dB @ K
        + dA.T @ P @ B @ K
        + K.T @ dB.T @ P @ A
        + K.T @ B.T @ P @ dA
        - K.T @ dB.T @ P @ B @ K
        - K.T @ B.T @ P @ dB @ K
    )


def forward_sensitivity(design, m):
    """Return ``S_m = dP/dtheta_m`` from one forward Lyapunov solve."""
    return solve_dlyap_t(design.A_cl, -dresidual_dtheta(design, m))


def grad_J_adjoint(design, dense=False):
    """Return the gradient of ``J`` from the single adjoint solution.

    :arg dense: loop over coordinates with explicit trace products

    """
    if dense:
        grad = np.array(
            [
                -float(np.sum(design.Lambda * dresidual_dtheta(design, m, dense=True)))
                for m in range(design.p)
            ]
        )
    else:
        W = design.P0 @ design.A_cl @ design.Lambda
        grad_A = 2.0 * W
        grad_B = -2.0 * W @ design.K0.T
        grad = np.hstack([grad_A, grad_B]).ravel()
    METRICS.incr("daresens.trace_assembly", value=design.p)
    return CostGradient(grad=grad, method="adjoint")


def grad_J_forward(design, threads=1):
    """Return the gradient of ``J`` from ``p`` forward sensitivities.

    :arg threads: worker threads for the per-coordinate solves

    """

    def _component(m):
        return float(np.sum(forward_sensitivity(design, m) * design.Sigma0))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            grad = np.array(list(executor.map(_component, range(design.p))))
    else:
        grad = np.array([_component(m) for m in range(design.p)])
    return CostGradient(grad=grad, method="forward")


def if2_score(fit, tau, grad_J, inverse_hvp=None):
    """Return ``IF2_k = g_k^T H^{-1} grad J(theta_hat)``.

    Positive means removing ``tau`` is predicted to raise the nominal cost.

    :arg inverse_hvp: callable ``v -> H^{-1} v``; defaults to the Cholesky solve

    """
    inverse_hvp = inverse_hvp or fit.solve
    v = inverse_hvp(grad_J.grad)
    return influence_dot(traj_gradient(fit, tau), v)
