# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Small synthetic datasets for unit tests."""

import numpy as np

from lqrinfluence.ident import Dataset, Trajectory
from testlib.oracles import random_stable


def simulate_linear(rng, A, B, T, sigma=0.0, traj_id=0):
    n_x, n_u = B.shape
    x = np.zeros((T, n_x))
    u = rng.standard_normal((T, n_u))
    x_plus = np.zeros((T, n_x))
    state = rng.standard_normal(n_x)
    for t in range(T):
        x[t] = state
        state = A @ state + B @ u[t] + sigma * rng.standard_normal(n_x)
        x_plus[t] = state
    return Trajectory(id=traj_id, x=x, u=u, x_plus=x_plus)


def random_dataset(rng, n_x=2, n_u=1, N=5, T=6, sigma=0.1, A=None, B=None, first_id=0):
    """Return ``(dataset, A, B)`` simulated from a random stable system."""
    if A is None:
        A = random_stable(rng, n_x, rho=0.8)
    if B is None:
        B = rng.standard_normal((n_x, n_u))
    trajectories = [
        simulate_linear(rng, A, B, T, sigma=sigma, traj_id=first_id + k) for k in range(N)
    ]
    return Dataset(n_x=n_x, n_u=n_u, trajectories=tuple(trajectories)), A, B
