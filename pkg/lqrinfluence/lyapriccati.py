# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
Dense matrix-equation kernels: discrete Lyapunov solves in both orientations,
the stabilizing solution of the discrete algebraic Riccati equation (DARE),
spectral radius, and residual maps.

All functions here are pure: they never mutate their inputs and hold no
shared state, so they're safe to call from multiple threads.

Lyapunov equations are solved through the Kronecker form of the operator. With
column-major ``vec``::

    T(X)  = X - A_cl^T X A_cl    ->   (I - A_cl^T (x) A_cl^T) vec(X)
    T*(Y) = Y - A_cl Y A_cl^T    ->   (I - A_cl (x) A_cl) vec(Y)

The DARE is solved with Newton-Kleinman iteration (one forward Lyapunov solve
per step) and falls back to fixed-point Riccati iteration when no stabilizing
initial gain can be found.

"""

from dataclasses import dataclass
import logging
import warnings

import numpy as np
import scipy.linalg

from lqrinfluence.errors import (
    AssumptionViolated,
    DataError,
    NoConvergence,
    NumericsError,
)
from lqrinfluence.libmarkus import METRICS


LOGGER = logging.getLogger(__name__)


class Unstable(NumericsError):
    """The closed-loop matrix isn't Schur stable so the Lyapunov operator isn't
    invertible on the cone we care about."""

    def __init__(self, msg, rho=None, stage=None):
        super().__init__(msg, stage=stage)
        self.rho = rho


class SingularOperator(NumericsError):
    pass


class EigenFailure(NumericsError):
    pass


class BadInput(DataError):
    pass


class NonStabilizable(AssumptionViolated):
    """No stabilizing DARE solution was found for the given model."""


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and iteration caps for the Riccati/Lyapunov kernels."""

    #: absolute residual tolerance
    tol_abs: float = 1e-12
    #: residual tolerance relative to ``||P||_F``
    tol_rel: float = 1e-10
    #: maximum number of Newton-Kleinman steps
    max_iter: int = 100
    #: spectral radii at or above ``1 - stability_margin`` count as unstable
    stability_margin: float = 1e-8
    #: value-iteration steps allowed when looking for a stabilizing start
    max_value_iter: int = 200
    #: fixed-point iterations allowed in the fallback
    max_fixed_point_iter: int = 10000


DEFAULT_OPTIONS = SolverOptions()


@dataclass(frozen=True, eq=False)
class DareSolution:
    """Stabilizing DARE solution and the quantities derived from it."""

    P: np.ndarray
    K: np.ndarray
    A_cl: np.ndarray
    M: np.ndarray
    residual_norm: float
    rho_cl: float
    iterations: int
    method: str


def _as_matrix(name, value, shape=None):
    try:
        arr = np.array(value, dtype=np.float64, ndmin=2)
    except (TypeError, ValueError) as exc:
        raise BadInput(f"{name} is not a real matrix") from exc
    if arr.ndim != 2:
        raise BadInput(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise BadInput(f"{name} has shape {arr.shape}, expected {shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise BadInput(f"{name} has non-finite entries")
    return arr


def _as_square(name, value):
    arr = _as_matrix(name, value)
    if arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise BadInput(f"{name} must be square and non-empty, got shape {arr.shape}")
    return arr


def _as_symmetric(name, value, n):
    arr = _as_matrix(name, value, shape=(n, n))
    scale = max(1.0, float(np.max(np.abs(arr))))
    if np.max(np.abs(arr - arr.T)) > 1e-8 * scale:
        raise BadInput(f"{name} is not symmetric")
    return symmetrize(arr)


def symmetrize(X):
    """Return ``(X + X^T) / 2``."""
    return 0.5 * (X + X.T)


def spectral_radius(M):
    """Return the largest eigenvalue modulus of a square matrix.

    :arg M: square matrix

    :returns: float

    :raises EigenFailure: if the eigenvalue computation fails

    """
    M = _as_square("M", M)
    try:
        eigvals = scipy.linalg.eigvals(M)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigenFailure(f"eigenvalue computation failed: {exc}") from exc
    if not np.all(np.isfinite(eigvals)):
        raise EigenFailure("eigenvalue computation returned non-finite values")
    return float(np.max(np.abs(eigvals)))


def lyapunov_operator_matrix(A_cl, adjoint=False):
    """Return the Kronecker matrix of the discrete Lyapunov operator.

    The forward operator is ``X -> X - A_cl^T X A_cl`` and the adjoint is
    ``Y -> Y - A_cl Y A_cl^T``. Both act on column-major ``vec``. The adjoint
    matrix is the transpose of the forward one.

    :arg A_cl: square matrix
    :arg adjoint: whether to build the adjoint operator

    :returns: ``n^2 x n^2`` array

    """
    A_cl = _as_square("A_cl", A_cl)
    n = A_cl.shape[0]
    if adjoint:
        kron = np.kron(A_cl, A_cl)
    else:
        kron = np.kron(A_cl.T, A_cl.T)
    return np.eye(n * n) - kron


def apply_lyapunov_operator(A_cl, X, adjoint=False):
    """Apply the discrete Lyapunov operator (or its adjoint) to ``X``."""
    if adjoint:
        return X - A_cl @ X @ A_cl.T
    return X - A_cl.T @ X @ A_cl


def _solve_lyapunov(A_cl, C, adjoint, stability_margin):
    A_cl = _as_square("A_cl", A_cl)
    n = A_cl.shape[0]
    C = _as_symmetric("C", C, n)

    rho = spectral_radius(A_cl)
    if rho >= 1.0 - stability_margin:
        raise Unstable(
            f"closed-loop spectral radius {rho:.12g} is not below "
            + f"1 - {stability_margin:g}",
            rho=rho,
        )

    operator = lyapunov_operator_matrix(A_cl, adjoint=adjoint)
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            lu_piv = scipy.linalg.lu_factor(operator)
        except (scipy.linalg.LinAlgWarning, np.linalg.LinAlgError) as exc:
            raise SingularOperator(f"Lyapunov operator is singular: {exc}") from exc

    diag = np.abs(np.diag(lu_piv[0]))
    if diag.min() <= np.finfo(np.float64).eps * diag.max():
        raise SingularOperator("Lyapunov operator is numerically singular")

    x = scipy.linalg.lu_solve(lu_piv, C.ravel(order="F"))
    return symmetrize(x.reshape((n, n), order="F"))


def solve_dlyap_t(A_cl, C, stability_margin=DEFAULT_OPTIONS.stability_margin):
    """Solve ``X - A_cl^T X A_cl = C`` for symmetric ``X``.

    :arg A_cl: Schur-stable square matrix
    :arg C: symmetric right-hand side

    :returns: symmetric solution ``X``

    :raises Unstable: if ``rho(A_cl) >= 1 - stability_margin``
    :raises SingularOperator: if the Kronecker system is numerically singular

    """
    X = _solve_lyapunov(A_cl, C, adjoint=False, stability_margin=stability_margin)
    METRICS.incr("lyapriccati.forward_lyapunov_solve")
    return X


def solve_dlyap_adj(A_cl, C, stability_margin=DEFAULT_OPTIONS.stability_margin):
    """Solve the adjoint equation ``L - A_cl L A_cl^T = C`` for symmetric ``L``.

    :arg A_cl: Schur-stable square matrix
    :arg C: symmetric right-hand side

    :returns: symmetric solution ``L``

    :raises Unstable: if ``rho(A_cl) >= 1 - stability_margin``
    :raises SingularOperator: if the Kronecker system is numerically singular

    """
    L = _solve_lyapunov(A_cl, C, adjoint=True, stability_margin=stability_margin)
    METRICS.incr("lyapriccati.adjoint_lyapunov_solve")
    return L


def _gain(P, A, B, R):
    """Return ``(K, M)`` with ``M = R + B^T P B`` and ``K = M^{-1} B^T P A``."""
    M = symmetrize(R + B.T @ P @ B)
    try:
        factor = scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"R + B^T P B is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(factor, B.T @ P @ A), M


def _riccati_step(P, A, B, Q, R):
    K, _ = _gain(P, A, B, R)
    return symmetrize(Q + A.T @ P @ A - A.T @ P @ B @ K)


def dare_residual(P, A, B, Q, R):
    """Return the DARE residual map.

    ``P - Q - A^T P A + A^T P B (R + B^T P B)^{-1} B^T P A``

    """
    P = np.asarray(P, dtype=np.float64)
    return P - _riccati_step(P, A, B, Q, R)


def _validate_dare_inputs(A, B, Q, R):
    A = _as_square("A", A)
    n = A.shape[0]
    B = _as_matrix("B", B)
    if B.shape[0] != n or B.shape[1] < 1:
        raise BadInput(f"B has shape {B.shape}, expected ({n}, n_u)")
    m = B.shape[1]
    Q = _as_symmetric("Q", Q, n)
    R = _as_symmetric("R", R, m)

    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise BadInput("R is not positive definite") from exc

    q_eigs = np.linalg.eigvalsh(Q)
    if q_eigs.min() < -1e-12 * max(1.0, abs(q_eigs).max()):
        raise BadInput("Q is not positive semidefinite")
    return A, B, Q, R


def _converged(residual, P, options):
    return residual <= options.tol_abs + options.tol_rel * np.linalg.norm(P)


def _initial_gain(A, B, Q, R, options):
    """Find a stabilizing starting gain or return None."""
    n, m = B.shape
    threshold = 1.0 - options.stability_margin
    if spectral_radius(A) < threshold:
        return np.zeros((m, n))

    P = Q.copy()
    for step in range(options.max_value_iter):
        P = _riccati_step(P, A, B, Q, R)
        if not np.all(np.isfinite(P)):
            break
        K, _ = _gain(P, A, B, R)
        if spectral_radius(A - B @ K) < threshold:
            LOGGER.debug("value iteration found a stabilizing gain after %d steps", step + 1)
            return K
    return None


def _newton_kleinman(A, B, Q, R, K, options):
    """Run Newton-Kleinman from a stabilizing gain.

    :returns: ``(P, iterations)`` or ``None`` if it didn't converge

    """
    best = None
    stalled = 0
    for iteration in range(1, options.max_iter + 1):
        A_cl = A - B @ K
        try:
            P = solve_dlyap_t(
                A_cl, symmetrize(Q + K.T @ R @ K), options.stability_margin
            )
        except (Unstable, SingularOperator) as exc:
            LOGGER.debug("newton-kleinman lost stability at step %d: %s", iteration, exc)
            return None
        K, _ = _gain(P, A, B, R)
        residual = np.linalg.norm(dare_residual(P, A, B, Q, R))
        LOGGER.debug("newton-kleinman step %d residual %.3e", iteration, residual)
        if _converged(residual, P, options):
            return P, iteration

        # Rounding floors the residual; stop once it no longer shrinks
        if best is not None and residual >= best:
            stalled += 1
            if stalled >= 3:
                return None
        else:
            best = residual
            stalled = 0
    return None


def _fixed_point(A, B, Q, R, options):
    P = Q.copy()
    residual = np.inf
    for iteration in range(1, options.max_fixed_point_iter + 1):
        P_next = _riccati_step(P, A, B, Q, R)
        if not np.all(np.isfinite(P_next)) or np.linalg.norm(P_next) > 1e15:
            raise NonStabilizable("Riccati iteration diverged")
        P = P_next
        residual = np.linalg.norm(dare_residual(P, A, B, Q, R))
        if _converged(residual, P, options):
            return P, iteration

    K, _ = _gain(P, A, B, R)
    rho = spectral_radius(A - B @ K)
    if rho >= 1.0 - options.stability_margin:
        raise NonStabilizable(
            f"Riccati iteration stalled without a stabilizing gain (rho {rho:.6g})",
            rho=rho,
        )
    raise NoConvergence(
        f"Riccati iteration did not converge in {options.max_fixed_point_iter} "
        + f"iterations (residual {residual:.3e})",
        iterations=options.max_fixed_point_iter,
        residual=residual,
    )


def solve_dare(A, B, Q, R, options=None):
    """Compute the stabilizing solution of the DARE.

    ``P = Q + A^T P A - A^T P B (R + B^T P B)^{-1} B^T P A``

    :arg A: ``n_x x n_x`` state matrix
    :arg B: ``n_x x n_u`` input matrix
    :arg Q: symmetric PSD state weight
    :arg R: symmetric PD input weight
    :arg options: :py:class:`SolverOptions` or None for defaults

    :returns: :py:class:`DareSolution`

    :raises BadInput: for dimension mismatches or an indefinite ``R``
    :raises NonStabilizable: if no stabilizing solution is found
    :raises NoConvergence: if the fallback iteration hits its cap

    """
    options = options or DEFAULT_OPTIONS
    A, B, Q, R = _validate_dare_inputs(A, B, Q, R)

    result = None
    K0 = _initial_gain(A, B, Q, R, options)
    if K0 is not None:
        result = _newton_kleinman(A, B, Q, R, K0, options)
    if result is not None:
        method = "newton_kleinman"
        P, iterations = result
    else:
        method = "fixed_point"
        LOGGER.debug("newton-kleinman unavailable, falling back to fixed-point iteration")
        METRICS.incr("lyapriccati.dare_fallback")
        P, iterations = _fixed_point(A, B, Q, R, options)

    K, M = _gain(P, A, B, R)
    A_cl = A - B @ K
    rho_cl = spectral_radius(A_cl)
    if rho_cl >= 1.0 - options.stability_margin:
        raise NonStabilizable(
            f"DARE solution is not stabilizing (closed-loop spectral radius "
            + f"{rho_cl:.6g})",
            rho=rho_cl,
        )

    residual_norm = float(np.linalg.norm(dare_residual(P, A, B, Q, R)))
    METRICS.incr("lyapriccati.dare_solve", tags=[f"method:{method}"])
    return DareSolution(
        P=P,
        K=K,
        A_cl=A_cl,
        M=M,
        residual_norm=residual_norm,
        rho_cl=rho_cl,
        iterations=iterations,
        method=method,
    )
