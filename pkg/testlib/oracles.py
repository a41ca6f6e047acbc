# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Reference computations that don't share code with lqrinfluence kernels."""

import numpy as np


def random_stable(rng, n, rho=0.9):
    """Random ``n x n`` matrix rescaled to spectral radius ``rho``."""
    A = rng.standard_normal((n, n))
    current = np.max(np.abs(np.linalg.eigvals(A)))
    return A * (rho / current)


def random_stabilizable(rng, n, m, rho_low=0.5, rho_high=1.3):
    """Random ``(A, B)`` with generic (hence controllable) ``B``.

    ``A`` may be open-loop unstable.

    """
    rho = rng.uniform(rho_low, rho_high)
    A = random_stable(rng, n, rho=rho)
    B = rng.standard_normal((n, m))
    return A, B


def random_symmetric(rng, n):
    X = rng.standard_normal((n, n))
    return X + X.T


def random_spd(rng, n, shift=0.1):
    X = rng.standard_normal((n, n))
    return X @ X.T + shift * np.eye(n)


def lyapunov_series(A_cl, C, adjoint=False, tol=1e-16, max_terms=200000):
    """Sum ``sum_j (A^T)^j C A^j`` (or the adjoint orientation) until terms vanish."""
    A = A_cl.T if adjoint else A_cl
    X = np.zeros_like(C, dtype=np.float64)
    term = np.array(C, dtype=np.float64)
    for _ in range(max_terms):
        X = X + term
        if np.max(np.abs(term)) <= tol * max(1.0, np.max(np.abs(X))):
            return X
        term = A.T @ term @ A
    raise AssertionError("series did not converge")


def scalar_dare_bisection(a, b, q, r, tol=1e-15):
    """Stabilizing root of the scalar DARE by bisection.

    ``p = q + a^2 p - a^2 b^2 p^2 / (r + b^2 p)``

    """

    def f(p):
        return q + a * a * p - (a * a * b * b * p * p) / (r + b * b * p) - p

    lo = q
    hi = max(1.0, 2 * q)
    while f(hi) > 0:
        hi *= 2
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def characteristic_polynomial(M):
    """Faddeev-LeVerrier coefficients of ``det(zI - M)``, leading 1 first."""
    n = M.shape[0]
    coeffs = [1.0]
    Mk = np.zeros_like(M)
    eye = np.eye(n)
    for k in range(1, n + 1):
        Mk = M @ Mk + coeffs[-1] * eye
        coeffs.append(-np.trace(M @ Mk) / k)
    return np.array(coeffs)


def polynomial_spectral_radius(M):
    return float(np.max(np.abs(np.roots(characteristic_polynomial(M)))))


def central_difference(fun, x, eps=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        grad[i] = (fun(x + step) - fun(x - step)) / (2 * eps)
    return grad


def central_difference_hessian(fun, x, eps=1e-4):
    """Hessian by central differences of central-difference gradients."""
    x = np.array(x, dtype=np.float64)
    n = x.size
    hess = np.zeros((n, n))
    for i in range(n):
        step = np.zeros_like(x)
        step[i] = eps
        hess[:, i] = (
            central_difference(fun, x + step, eps) - central_difference(fun, x - step, eps)
        ) / (2 * eps)
    return 0.5 * (hess + hess.T)


def stacked_ridge(Z, X_plus, lam):
    """Ridge fit of ``x+ = [A B] z`` by a generic dense solve of the stacked system.

    Rows of ``Z`` are ``[x; u]`` and rows of ``X_plus`` are ``x+``. Returns the
    row-stacked ``vec([A B])``.

    """
    n_x = X_plus.shape[1]
    d = Z.shape[1]
    p = n_x * d
    rows = []
    targets = []
    for z, x_plus in zip(Z, X_plus, strict=True):
        phi = np.zeros((n_x, p))
        for i in range(n_x):
            phi[i, i * d : (i + 1) * d] = z
        rows.append(phi)
        targets.append(x_plus)
    Phi = np.vstack(rows)
    y = np.concatenate(targets)
    return np.linalg.solve(Phi.T @ Phi + lam * np.eye(p), Phi.T @ y)


def average_ranks(values):
    """Ranks starting at 1 with ties sharing their average rank, by counting."""
    values = list(values)
    ranks = []
    for v in values:
        less = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(1 + less + (equal - 1) / 2)
    return ranks


def pearson_by_hand(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y, strict=True))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def topk_by_hand(predicted, truth, k):
    order_p = sorted(range(len(predicted)), key=lambda i: (-predicted[i], i))[:k]
    order_t = sorted(range(len(truth)), key=lambda i: (-truth[i], i))[:k]
    return len(set(order_p) & set(order_t)) / k
