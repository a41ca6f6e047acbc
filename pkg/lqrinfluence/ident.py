# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
Ridge-regularized least-squares identification of ``x+ = A x + B u`` with the
per-trajectory bookkeeping the influence scores need.

Parameter layout: ``theta`` stacks the rows of ``[A B]``, so the regressor of
one transition is ``Phi(x, u) = I_{n_x} (x) [x^T u^T]``. With ``z = [x; u]``
and ``d = n_x + n_u`` every Hessian in here is block diagonal with ``n_x``
identical ``d x d`` blocks::

    H   = 2 I (x) (G + lambda I)      G   = sum over all transitions of z z^T
    H_k = 2 I (x) G_k                 G_k = sum over trajectory k of z z^T

so solves cost one ``d x d`` Cholesky factorization instead of a ``p x p``
one. The dense path (``structured=False``) materializes the stacked regressor
and factors the full ``p x p`` Hessian; it exists for testing.

Losses are unnormalized sums of squared one-step residuals.

"""

from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from lqrinfluence.errors import (
    ConfigError,
    DataError,
    DimensionMismatch,
    EmptyDataset,
    NoConvergence,
    NumericsError,
)
from lqrinfluence.libmarkus import METRICS


LOGGER = logging.getLogger(__name__)


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Transition:
    x: np.ndarray
    u: np.ndarray
    x_plus: np.ndarray


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One trajectory stored as row-per-step arrays.

    :arg id: non-negative integer id, unique within a dataset
    :arg x: ``(T, n_x)`` states
    :arg u: ``(T, n_u)`` inputs
    :arg x_plus: ``(T, n_x)`` successor states

    """

    id: int
    x: np.ndarray
    u: np.ndarray
    x_plus: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64, ndmin=2)
        u = np.array(self.u, dtype=np.float64, ndmin=2)
        x_plus = np.array(self.x_plus, dtype=np.float64, ndmin=2)
        if int(self.id) != self.id or self.id < 0:
            raise DataError(f"trajectory id must be a non-negative integer, got {self.id!r}")
        if x.ndim != 2 or u.ndim != 2 or x_plus.ndim != 2:
            raise DimensionMismatch(f"trajectory {self.id}: arrays must be 2-dimensional")
        if x.shape[0] == 0:
            raise DataError(f"trajectory {self.id} has no transitions")
        if u.shape[0] != x.shape[0] or x_plus.shape != x.shape:
            raise DimensionMismatch(
                f"trajectory {self.id}: x {x.shape}, u {u.shape}, x_plus {x_plus.shape}"
            )
        if x.shape[1] < 1 or u.shape[1] < 1:
            raise DimensionMismatch(f"trajectory {self.id}: n_x and n_u must be positive")
        for name, arr in (("x", x), ("u", u), ("x_plus", x_plus)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"trajectory {self.id}: {name} has non-finite entries")

        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "x_plus", _frozen(x_plus))

    @classmethod
    def from_transitions(cls, traj_id, transitions):
        transitions = list(transitions)
        if not transitions:
            raise DataError(f"trajectory {traj_id} has no transitions")
        return cls(
            id=traj_id,
            x=np.array([tr.x for tr in transitions]),
            u=np.array([tr.u for tr in transitions]),
            x_plus=np.array([tr.x_plus for tr in transitions]),
        )

    @property
    def T(self):
        return self.x.shape[0]

    @property
    def n_x(self):
        return self.x.shape[1]

    @property
    def n_u(self):
        return self.u.shape[1]

    @property
    def z(self):
        """``(T, n_x + n_u)`` regressor rows ``[x u]``."""
        return np.hstack([self.x, self.u])

    @property
    def transitions(self):
        return [
            Transition(x=self.x[t], u=self.u[t], x_plus=self.x_plus[t])
            for t in range(self.T)
        ]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Trajectories sharing state and input dimensions."""

    n_x: int
    n_u: int
    trajectories: tuple = field(default_factory=tuple)

    def __post_init__(self):
        trajectories = tuple(self.trajectories)
        if not trajectories:
            raise EmptyDataset("dataset has no trajectories")
        seen = set()
        for tau in trajectories:
            if tau.n_x != self.n_x or tau.n_u != self.n_u:
                raise DimensionMismatch(
                    f"trajectory {tau.id} has (n_x, n_u) = ({tau.n_x}, {tau.n_u}), "
                    + f"dataset has ({self.n_x}, {self.n_u})"
                )
            if tau.id in seen:
                raise DataError(f"duplicate trajectory id {tau.id}")
            seen.add(tau.id)
        object.__setattr__(self, "trajectories", trajectories)

    @property
    def N(self):
        return len(self.trajectories)

    @property
    def d(self):
        return self.n_x + self.n_u

    @property
    def p(self):
        return self.n_x * self.d

    @property
    def ids(self):
        return [tau.id for tau in self.trajectories]

    def __iter__(self):
        return iter(self.trajectories)

    def __len__(self):
        return self.N

    def by_id(self, traj_id):
        for tau in self.trajectories:
            if tau.id == traj_id:
                return tau
        raise DataError(f"no trajectory with id {traj_id}")

    def without(self, traj_id):
        """Return a dataset with trajectory ``traj_id`` removed."""
        self.by_id(traj_id)
        return Dataset(
            n_x=self.n_x,
            n_u=self.n_u,
            trajectories=tuple(tau for tau in self.trajectories if tau.id != traj_id),
        )

    def stacked(self):
        """Return ``(Z, X_plus)`` with every transition as a row."""
        Z = np.vstack([tau.z for tau in self.trajectories])
        X_plus = np.vstack([tau.x_plus for tau in self.trajectories])
        return Z, X_plus

    def require_loto(self):
        """Raise unless the dataset has enough trajectories for leave-one-out."""
        if self.N < 2:
            raise DataError(f"leave-one-trajectory-out needs N >= 2, got N={self.N}")


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Row-stacked ``vec([A B])``."""

    theta: np.ndarray
    n_x: int
    n_u: int

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.size != self.n_x * (self.n_x + self.n_u):
            raise DimensionMismatch(
                f"theta has {theta.size} entries, expected {self.n_x * (self.n_x + self.n_u)}"
            )
        if not np.all(np.isfinite(theta)):
            raise DataError("theta has non-finite entries")
        object.__setattr__(self, "theta", _frozen(theta))

    @classmethod
    def from_matrices(cls, A, B):
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        return cls(theta=np.hstack([A, B]).ravel(), n_x=A.shape[0], n_u=B.shape[1])

    @property
    def d(self):
        return self.n_x + self.n_u

    @property
    def p(self):
        return self.theta.size

    def as_matrix(self):
        """Return ``[A B]`` as an ``n_x x d`` array."""
        return self.theta.reshape(self.n_x, self.d)

    def matrices(self):
        """Return ``(A, B)``."""
        W = self.as_matrix()
        return W[:, : self.n_x].copy(), W[:, self.n_x :].copy()

    def shifted(self, delta):
        return ParamVector(theta=self.theta + delta, n_x=self.n_x, n_u=self.n_u)


class InvalidRegularization(ConfigError):
    pass


@dataclass(frozen=True, eq=False)
class RidgeFit:
    """Immutable ridge fit.

    Nothing mutates a fit after :py:func:`fit_ridge` returns it, so per-trajectory
    scores can be computed from several threads at once.

    """

    theta_hat: ParamVector
    ridge_lambda: float
    gram: np.ndarray
    gram_per_traj: dict
    structured: bool
    data: Dataset
    # lower Cholesky factor of G + lambda I (structured) or of H (dense)
    factor: np.ndarray
    regressors: np.ndarray
    dense_hessian: np.ndarray = None

    @property
    def n_x(self):
        return self.theta_hat.n_x

    @property
    def n_u(self):
        return self.theta_hat.n_u

    @property
    def d(self):
        return self.theta_hat.d

    @property
    def p(self):
        return self.theta_hat.p

    @property
    def block(self):
        """``G + lambda I``."""
        return self.gram + self.ridge_lambda * np.eye(self.d)

    @property
    def hessian(self):
        """The full ``p x p`` Hessian of the regularized objective."""
        if self.dense_hessian is not None:
            return self.dense_hessian
        return 2.0 * np.kron(np.eye(self.n_x), self.block)

    @property
    def hessian_factor(self):
        return self.factor

    def solve(self, v):
        """Return ``H^{-1} v`` by Cholesky back-substitution."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.p,):
            raise DimensionMismatch(f"vector has shape {v.shape}, expected ({self.p},)")
        if not self.structured:
            return scipy.linalg.cho_solve((self.factor, True), v)
        V = v.reshape(self.n_x, self.d)
        return (0.5 * scipy.linalg.cho_solve((self.factor, True), V.T).T).ravel()

    def hvp(self, v):
        """Return ``H v`` using the cached Gram block."""
        v = np.asarray(v, dtype=np.float64)
        if not self.structured:
            return self.dense_hessian @ v
        V = v.reshape(self.n_x, self.d)
        return (2.0 * V @ self.block).ravel()

    def hvp_matrix_free(self, v):
        """Return ``H v`` from the regressor rows without forming any Gram matrix."""
        V = np.asarray(v, dtype=np.float64).reshape(self.n_x, self.d)
        Z = self.regressors
        return (2.0 * ((Z @ V.T).T @ Z + self.ridge_lambda * V)).ravel()

    def energy_norm(self, v):
        """Return ``sqrt(v^T H v)``."""
        return float(np.sqrt(max(0.0, float(v @ self.hvp(v)))))

    def residuals(self, tau):
        """Return ``(T, n_x)`` one-step residuals ``x+ - [A B] z``."""
        return tau.x_plus - tau.z @ self.theta_hat.as_matrix().T


@dataclass(frozen=True, eq=False)
class LotoShift:
    """Leave-one-trajectory-out parameter shifts for one trajectory.

    Fields that weren't requested are None.

    """

    traj_id: int
    exact_shift: np.ndarray = None
    first_order_shift: np.ndarray = None
    second_order_shift: np.ndarray = None
    delta_k: float = None

    @property
    def bound_relative_error(self):
        """``delta_k / (1 - delta_k)`` or inf when ``delta_k >= 1``."""
        if self.delta_k is None:
            return None
        if self.delta_k >= 1.0:
            return float("inf")
        return self.delta_k / (1.0 - self.delta_k)


def _check_dims(tau, n_x, n_u):
    if tau.n_x != n_x or tau.n_u != n_u:
        raise DimensionMismatch(
            f"trajectory {tau.id} has (n_x, n_u) = ({tau.n_x}, {tau.n_u}), "
            + f"expected ({n_x}, {n_u})"
        )


def regressor(x, u):
    """Return the ``n_x x p`` regressor ``Phi`` with ``Phi theta = A x + B u``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.ndim != 1 or u.ndim != 1:
        raise DimensionMismatch("x and u must be vectors")
    z = np.concatenate([x, u])
    return np.kron(np.eye(x.size), z[np.newaxis, :])


def stacked_regressor(data):
    """Return ``(Phi, y)`` for every transition of ``data`` stacked vertically."""
    Z, X_plus = data.stacked()
    S = Z.shape[0]
    n_x = data.n_x
    Phi = np.zeros((S, n_x, n_x, data.d))
    idx = np.arange(n_x)
    Phi[:, idx, idx, :] = Z[:, np.newaxis, :]
    return Phi.reshape(S * n_x, data.p), X_plus.ravel()


def _cholesky(M, what):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"Cholesky factorization of {what} failed: {exc}") from exc


def fit_ridge(data, ridge_lambda, structured=True):
    """Fit ``theta`` by Tikhonov-regularized least squares.

    Minimizes ``sum_s ||x+_s - Phi_s theta||^2 + lambda ||theta||^2``.

    :arg data: the :py:class:`Dataset`
    :arg ridge_lambda: regularization, must be positive
    :arg structured: use the block-diagonal Hessian (True) or the dense one

    :returns: :py:class:`RidgeFit`

    """
    ridge_lambda = float(ridge_lambda)
    if not ridge_lambda > 0:
        raise InvalidRegularization(f"ridge lambda must be positive, got {ridge_lambda}")
    if data is None or data.N == 0:
        raise EmptyDataset("cannot fit an empty dataset")

    n_x, d = data.n_x, data.d
    gram_per_traj = {}
    gram = np.zeros((d, d))
    cross = np.zeros((d, n_x))
    for tau in data:
        z = tau.z
        G_k = z.T @ z
        gram_per_traj[tau.id] = _frozen(G_k)
        gram = gram + G_k
        cross = cross + z.T @ tau.x_plus

    dense_hessian = None
    if structured:
        factor = _cholesky(gram + ridge_lambda * np.eye(d), "the Gram block")
        W_t = scipy.linalg.cho_solve((factor, True), cross)
        theta = W_t.T.ravel()
    else:
        Phi, y = stacked_regressor(data)
        dense_hessian = _frozen(2.0 * Phi.T @ Phi + 2.0 * ridge_lambda * np.eye(data.p))
        factor = _cholesky(dense_hessian, "the Hessian")
        theta = scipy.linalg.cho_solve((factor, True), 2.0 * Phi.T @ y)

    METRICS.incr("ident.hessian_factorization")
    LOGGER.debug(
        "fit ridge N=%d n_x=%d n_u=%d lambda=%g structured=%s",
        data.N,
        data.n_x,
        data.n_u,
        ridge_lambda,
        structured,
    )
    return RidgeFit(
        theta_hat=ParamVector(theta=theta, n_x=n_x, n_u=data.n_u),
        ridge_lambda=ridge_lambda,
        gram=_frozen(gram),
        gram_per_traj=gram_per_traj,
        structured=structured,
        data=data,
        factor=_frozen(factor),
        regressors=_frozen(data.stacked()[0]),
        dense_hessian=dense_hessian,
    )


def traj_loss(theta, tau):
    """Return the unnormalized squared-residual loss of ``tau`` at ``theta``."""
    _check_dims(tau, theta.n_x, theta.n_u)
    E = tau.x_plus - tau.z @ theta.as_matrix().T
    return float(np.sum(E * E))


def _loss_gradient(theta, tau):
    E = tau.x_plus - tau.z @ theta.as_matrix().T
    return (-2.0 * E.T @ tau.z).ravel()


def traj_gradient(fit, tau):
    """Return ``g_k``, the gradient of the trajectory loss at ``theta_hat``.

    ``g_k = -2 sum_s Phi_s^T (x+_s - Phi_s theta_hat)``

    """
    _check_dims(tau, fit.n_x, fit.n_u)
    return _loss_gradient(fit.theta_hat, tau)


def traj_gram(tau):
    z = tau.z
    return z.T @ z


def traj_hessian(tau):
    """Return the ``p x p`` trajectory Hessian ``2 I (x) G_k``."""
    return 2.0 * np.kron(np.eye(tau.n_x), traj_gram(tau))


def _gram_of(fit, tau):
    _check_dims(tau, fit.n_x, fit.n_u)
    if tau.id not in fit.gram_per_traj:
        raise DataError(f"trajectory {tau.id} is not part of the fitted dataset")
    return fit.gram_per_traj[tau.id]


def exact_loto(fit, tau):
    """Return the exact leave-one-out shift ``(H - H_k)^{-1} g_k``.

    Adding the shift to ``theta_hat`` gives the fit on the dataset without
    ``tau``.

    """
    G_k = _gram_of(fit, tau)
    g = traj_gradient(fit, tau)
    if fit.structured:
        factor = _cholesky(fit.block - G_k, "the leave-one-out Gram block")
        V = g.reshape(fit.n_x, fit.d)
        shift = (0.5 * scipy.linalg.cho_solve((factor, True), V.T).T).ravel()
    else:
        factor = _cholesky(fit.dense_hessian - traj_hessian(tau), "the leave-one-out Hessian")
        shift = scipy.linalg.cho_solve((factor, True), g)
    METRICS.incr("ident.loto_factorization")
    return LotoShift(traj_id=tau.id, exact_shift=shift)


def curvature_share(fit, tau):
    """Return ``delta_k``, the largest generalized eigenvalue of ``(H_k, H)``."""
    G_k = _gram_of(fit, tau)
    if fit.structured:
        L = fit.factor
        M = G_k
    else:
        L = fit.factor
        M = traj_hessian(tau)
    left = scipy.linalg.solve_triangular(L, M, lower=True)
    whitened = scipy.linalg.solve_triangular(L, left.T, lower=True)
    whitened = 0.5 * (whitened + whitened.T)
    return float(max(0.0, np.linalg.eigvalsh(whitened)[-1]))


def _apply_traj_hessian(fit, tau, v):
    G_k = _gram_of(fit, tau)
    V = v.reshape(fit.n_x, fit.d)
    return (2.0 * V @ G_k).ravel()


def first_order_loto(fit, tau):
    """Return the first- and second-order Neumann shifts and ``delta_k``.

    ``first = H^{-1} g_k`` and ``second = first + H^{-1} H_k first``.

    """
    g = traj_gradient(fit, tau)
    first = fit.solve(g)
    second = first + fit.solve(_apply_traj_hessian(fit, tau, first))
    delta_k = curvature_share(fit, tau)
    if delta_k >= 1.0:
        LOGGER.warning("trajectory %s has curvature share %.4f >= 1", tau.id, delta_k)
    return LotoShift(
        traj_id=tau.id,
        first_order_shift=first,
        second_order_shift=second,
        delta_k=delta_k,
    )


def loto_shift(fit, tau):
    """Return a :py:class:`LotoShift` with every field filled in."""
    approx = first_order_loto(fit, tau)
    exact = exact_loto(fit, tau)
    return LotoShift(
        traj_id=tau.id,
        exact_shift=exact.exact_shift,
        first_order_shift=approx.first_order_shift,
        second_order_shift=approx.second_order_shift,
        delta_k=approx.delta_k,
    )


def conjugate_gradient(matvec, b, tol=1e-10, max_iter=1000):
    """Solve ``M x = b`` for symmetric positive definite ``M`` given as a matvec.

    Runs :py:func:`scipy.sparse.linalg.cg` on a ``LinearOperator`` wrapping
    ``matvec``, so ``M`` is never formed.

    :returns: ``(x, iterations)``

    :raises NoConvergence: when ``||M x - b|| > tol ||b||`` after ``max_iter``
        iterations

    """
    b = np.asarray(b, dtype=np.float64)
    if not np.any(b):
        return np.zeros_like(b), 0

    operator = scipy.sparse.linalg.LinearOperator(
        shape=(b.size, b.size), matvec=matvec, dtype=np.float64
    )
    iterations = 0

    def _count(xk):
        nonlocal iterations
        iterations += 1

    x, info = scipy.sparse.linalg.cg(
        operator, b, rtol=tol, atol=0.0, maxiter=max_iter, callback=_count
    )
    if info < 0:
        raise NumericsError(f"conjugate gradient broke down (info {info})")
    if info > 0:
        residual = float(np.linalg.norm(b - matvec(x)))
        raise NoConvergence(
            f"conjugate gradient did not converge in {max_iter} iterations "
            + f"(relative residual {residual / np.linalg.norm(b):.3e})",
            iterations=info,
            residual=residual,
        )
    return x, iterations


def cg_inverse_hvp(fit, v, tol=1e-10, max_iter=1000, matrix_free=True):
    """Return ``H^{-1} v`` by conjugate gradient.

    :arg matrix_free: apply ``H`` from the regressor rows without forming it

    """
    matvec = fit.hvp_matrix_free if matrix_free else fit.hvp
    x, iterations = conjugate_gradient(matvec, v, tol=tol, max_iter=max_iter)
    METRICS.histogram("ident.cg_iterations", value=iterations)
    return x


def pred_loss(theta, test):
    """Return the held-out prediction loss over every transition in ``test``."""
    if test is None or test.N == 0:
        raise EmptyDataset("test set is empty")
    return float(sum(traj_loss(theta, tau) for tau in test))


def pred_loss_grad(theta, test):
    if test is None or test.N == 0:
        raise EmptyDataset("test set is empty")
    grad = np.zeros(theta.p)
    for tau in test:
        _check_dims(tau, theta.n_x, theta.n_u)
        grad = grad + _loss_gradient(theta, tau)
    return grad


def pred_hessian(test):
    """Return the constant ``p x p`` Hessian of the prediction loss (no lambda)."""
    if test is None or test.N == 0:
        raise EmptyDataset("test set is empty")
    Z, _ = test.stacked()
    return 2.0 * np.kron(np.eye(test.n_x), Z.T @ Z)


def exact_pred_delta(fit, tau, test, shift=None):
    """Return the exact change in prediction loss when ``tau`` is removed.

    The loss is quadratic, so ``grad^T D + D^T H_pred D / 2`` is exact.

    :arg shift: a :py:class:`LotoShift` with ``exact_shift``, computed if None

    """
    if shift is None:
        shift = exact_loto(fit, tau)
    delta = shift.exact_shift
    grad = pred_loss_grad(fit.theta_hat, test)
    Z, _ = test.stacked()
    D = delta.reshape(fit.n_x, fit.d)
    # D^T (2 I (x) Z^T Z) D without forming the p x p matrix
    quad = 2.0 * float(np.sum((Z @ D.T) ** 2))
    return float(grad @ delta) + 0.5 * quad


def influence_dot(g_k, v):
    """Return ``g_k^T v``; every influence score goes through here."""
    return float(np.dot(g_k, v))


def if1_score(fit, tau, test, inverse_hvp=None):
    """Return ``IF1_k = g_k^T H^{-1} grad L_pred(theta_hat)``.

    Positive means the prediction loss is predicted to rise when ``tau`` is
    removed.

    :arg inverse_hvp: callable ``v -> H^{-1} v``; defaults to the Cholesky solve

    """
    inverse_hvp = inverse_hvp or fit.solve
    v = inverse_hvp(pred_loss_grad(fit.theta_hat, test))
    return influence_dot(traj_gradient(fit, tau), v)


def baseline_scores(fit, tau, direction):
    """Return ``(grad_only, residual_norm)`` baseline scores.

    ``grad_only`` is ``g_k^T direction`` and ``residual_norm`` is the trajectory
    loss at ``theta_hat``.

    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (fit.p,):
        raise DimensionMismatch(f"direction has shape {direction.shape}, expected ({fit.p},)")
    g = traj_gradient(fit, tau)
    return influence_dot(g, direction), traj_loss(fit.theta_hat, tau)
