# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
Benchmark plants and trajectory simulation.

Families:

* ``S1``: mass-spring-damper (``m = k = c = 1``) discretized with a
  zero-order hold at ``dt = 0.1``; 2 states, 1 input
* ``S2``: planar vehicle, longitudinal and lateral double integrators with
  drag and a seeded weak coupling; 4 states, 2 inputs
* ``S3``: seeded random coupled system, ``(8, 3)`` or ``(10, 4)``
* ``S4``: two-link arm hanging from its pivot, stepped with RK4; 4 states,
  2 torques

Random streams are keyed by ``(seed, stream, index)`` through
:py:class:`numpy.random.SeedSequence` so every trajectory can be regenerated on
its own and serial and threaded runs see the same numbers.

"""

from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.linalg

from lqrinfluence.errors import ConfigError, DataError, NonFinite
from lqrinfluence.ident import Trajectory
from lqrinfluence.lyapriccati import spectral_radius


LOGGER = logging.getLogger(__name__)

FAMILIES = ("S1", "S2", "S3", "S4")

#: Spectral radius the generated linear families are kept at or below
SPECTRAL_RADIUS_CAP = 0.95

#: State norm that counts as a blown-up simulation
BLOWUP_NORM = 1e6

# stream ids for SeedSequence spawn keys
SYSTEM_STREAM = 0
TRAIN_STREAM = 1
TEST_STREAM = 2
PLANT_STREAM = 3

S3_SIZES = {8: (8, 3), 10: (10, 4)}


class UnknownFamily(ConfigError):
    pass


def stream_rng(seed, stream, index=0):
    """Return the generator for one ``(seed, stream, index)`` key."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, index)))


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """``x+ = A x + B u + eps tanh(x) + w`` with ``w ~ N(0, sigma_w^2 I)``.

    ``eps`` is the mismatch strength; at zero the plant is exactly linear.

    """

    A_true: np.ndarray
    B_true: np.ndarray
    sigma_w: float = 0.0
    name: str = ""
    mismatch_strength: float = 0.0

    def __post_init__(self):
        A = np.array(self.A_true, dtype=np.float64)
        B = np.array(self.B_true, dtype=np.float64, ndmin=2)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DataError(f"bad system shapes A {A.shape}, B {B.shape}")
        if self.sigma_w < 0 or self.mismatch_strength < 0:
            raise ConfigError("sigma_w and mismatch strength must be non-negative")
        object.__setattr__(self, "A_true", A)
        object.__setattr__(self, "B_true", B)

    @property
    def n_x(self):
        return self.A_true.shape[0]

    @property
    def n_u(self):
        return self.B_true.shape[1]

    @property
    def is_linear(self):
        return self.mismatch_strength == 0.0

    def step(self, x, u):
        """Noise-free step; ``x`` and ``u`` may carry leading batch axes."""
        x_next = x @ self.A_true.T + u @ self.B_true.T
        if self.mismatch_strength:
            x_next = x_next + self.mismatch_strength * np.tanh(x)
        return x_next

    def to_record(self):
        return {
            "kind": "linear",
            "name": self.name,
            "A": self.A_true.tolist(),
            "B": self.B_true.tolist(),
            "sigma_w": float(self.sigma_w),
            "mismatch_strength": float(self.mismatch_strength),
        }


@dataclass(frozen=True, eq=False)
class TwoLinkArm:
    """Rigid two-link arm with point masses at the link ends.

    State is ``(q1, q2, dq1, dq2)`` with ``q1`` measured from straight down
    and ``q2`` relative to link one; inputs are the joint torques. Dynamics::

        M(q) ddq + C(q, dq) dq + g(q) + b dq = tau

    """

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 9.81
    damping: float = 0.1
    dt: float = 0.05
    sigma_w: float = 0.0
    name: str = "S4"
    n_x: int = field(default=4, init=False)
    n_u: int = field(default=2, init=False)

    def __post_init__(self):
        for attr in ("m1", "m2", "l1", "l2", "dt"):
            if not getattr(self, attr) > 0:
                raise ConfigError(f"two-link arm parameter {attr} must be positive")
        if self.g < 0 or self.damping < 0 or self.sigma_w < 0:
            raise ConfigError("gravity, damping and sigma_w must be non-negative")

    is_linear = False

    def accelerations(self, x, u):
        q1, q2, dq1, dq2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        m1, m2, l1, l2, g = self.m1, self.m2, self.l1, self.l2, self.g
        c2 = np.cos(q2)
        h = m2 * l1 * l2 * np.sin(q2)

        M11 = (m1 + m2) * l1**2 + m2 * l2**2 + 2 * m2 * l1 * l2 * c2
        M12 = m2 * l2**2 + m2 * l1 * l2 * c2
        M22 = m2 * l2**2

        gravity1 = (m1 + m2) * g * l1 * np.sin(q1) + m2 * g * l2 * np.sin(q1 + q2)
        gravity2 = m2 * g * l2 * np.sin(q1 + q2)

        rhs1 = u[..., 0] + h * dq2 * (2 * dq1 + dq2) - gravity1 - self.damping * dq1
        rhs2 = u[..., 1] - h * dq1**2 - gravity2 - self.damping * dq2

        det = M11 * M22 - M12 * M12
        ddq1 = (M22 * rhs1 - M12 * rhs2) / det
        ddq2 = (M11 * rhs2 - M12 * rhs1) / det
        return ddq1, ddq2

    def derivative(self, x, u):
        ddq1, ddq2 = self.accelerations(x, u)
        return np.stack([x[..., 2], x[..., 3], ddq1, ddq2], axis=-1)

    def step(self, x, u, dt=None):
        """One RK4 step of length ``dt`` with the torque held constant."""
        dt = self.dt if dt is None else dt
        k1 = self.derivative(x, u)
        k2 = self.derivative(x + 0.5 * dt * k1, u)
        k3 = self.derivative(x + 0.5 * dt * k2, u)
        k4 = self.derivative(x + dt * k3, u)
        return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def to_record(self):
        return {
            "kind": "two_link_arm",
            "name": self.name,
            "m1": self.m1,
            "m2": self.m2,
            "l1": self.l1,
            "l2": self.l2,
            "g": self.g,
            "damping": self.damping,
            "dt": self.dt,
            "sigma_w": float(self.sigma_w),
        }


def system_from_record(record):
    """Rebuild a system from :py:meth:`LinearSystem.to_record` output."""
    try:
        kind = record["kind"]
        if kind == "linear":
            return LinearSystem(
                A_true=np.array(record["A"], dtype=np.float64),
                B_true=np.array(record["B"], dtype=np.float64),
                sigma_w=record["sigma_w"],
                name=record["name"],
                mismatch_strength=record["mismatch_strength"],
            )
        if kind == "two_link_arm":
            params = {key: value for key, value in record.items() if key != "kind"}
            return TwoLinkArm(**params)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad system record: {exc}") from exc
    raise DataError(f"unknown system kind {record.get('kind')!r}")


def zoh_discretize(A_c, B_c, dt):
    """Zero-order-hold discretization through the augmented matrix exponential."""
    n, m = B_c.shape
    augmented = np.zeros((n + m, n + m))
    augmented[:n, :n] = A_c
    augmented[:n, n:] = B_c
    Phi = scipy.linalg.expm(augmented * dt)
    return Phi[:n, :n], Phi[:n, n:]


def rescale_spectral_radius(A, target):
    rho = spectral_radius(A)
    if rho == 0.0:
        return A
    return A * (target / rho)


def _mass_spring_damper(mass=1.0, stiffness=1.0, damping=1.0, dt=0.1):
    A_c = np.array([[0.0, 1.0], [-stiffness / mass, -damping / mass]])
    B_c = np.array([[0.0], [1.0 / mass]])
    return zoh_discretize(A_c, B_c, dt)


def _planar_vehicle(rng, dt=0.1):
    # longitudinal (position, speed) and lateral (offset, lateral speed) with drag
    A_c = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, -0.5, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, -0.4, -0.8],
        ]
    )
    B_c = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    A, B = zoh_discretize(A_c, B_c, dt)
    coupling = np.zeros((4, 4))
    coupling[:2, 2:] = 0.02 * rng.standard_normal((2, 2))
    coupling[2:, :2] = 0.02 * rng.standard_normal((2, 2))
    return A + coupling, B


def _random_coupled(rng, n_x, n_u):
    A = rng.standard_normal((n_x, n_x)) / np.sqrt(n_x)
    B = rng.standard_normal((n_x, n_u)) / np.sqrt(n_x)
    return A, B


def make_system(
    family,
    seed=0,
    size=8,
    sigma_w=0.03,
    spectral_radius_target=None,
    mismatch_strength=0.0,
):
    """Build a benchmark plant.

    :arg family: ``"S1"`` through ``"S4"``
    :arg seed: seed for the seeded families (S2 coupling, S3 matrices)
    :arg size: S3 state dimension, 8 or 10
    :arg sigma_w: process noise standard deviation
    :arg spectral_radius_target: rescale ``A`` to exactly this spectral radius;
        None keeps S1 as is and caps S2 and S3 at ``SPECTRAL_RADIUS_CAP``
    :arg mismatch_strength: ``eps`` of the ``eps tanh(x)`` term, linear families
        only

    :returns: :py:class:`LinearSystem` or :py:class:`TwoLinkArm`

    :raises UnknownFamily: for anything but S1 to S4

    """
    if family not in FAMILIES:
        raise UnknownFamily(f"unknown system family {family!r}; expected one of {FAMILIES}")

    if family == "S4":
        if spectral_radius_target is not None or mismatch_strength:
            raise ConfigError("S4 supports neither spectral radius targets nor mismatch")
        return TwoLinkArm(sigma_w=sigma_w)

    rng = stream_rng(seed, SYSTEM_STREAM)
    if family == "S1":
        A, B = _mass_spring_damper()
    elif family == "S2":
        A, B = _planar_vehicle(rng)
    else:
        if size not in S3_SIZES:
            raise ConfigError(f"S3 size must be one of {sorted(S3_SIZES)}, got {size}")
        A, B = _random_coupled(rng, *S3_SIZES[size])

    if spectral_radius_target is not None:
        if not 0.0 < spectral_radius_target < 1.0:
            raise ConfigError(
                f"spectral radius target must be in (0, 1), got {spectral_radius_target}"
            )
        A = rescale_spectral_radius(A, spectral_radius_target)
    elif family != "S1" and spectral_radius(A) > SPECTRAL_RADIUS_CAP:
        A = rescale_spectral_radius(A, SPECTRAL_RADIUS_CAP)

    LOGGER.debug("made %s system rho=%.4f", family, spectral_radius(A))
    return LinearSystem(
        A_true=A,
        B_true=B,
        sigma_w=sigma_w,
        name=family,
        mismatch_strength=mismatch_strength,
    )


def simulate(system, x0, inputs, rng=None, traj_id=0):
    """Simulate one open-loop trajectory.

    :arg system: :py:class:`LinearSystem` or :py:class:`TwoLinkArm`
    :arg x0: initial state
    :arg inputs: ``(T, n_u)`` input sequence
    :arg rng: generator for the process noise; None means noise-free
    :arg traj_id: id of the returned trajectory

    :returns: :py:class:`lqrinfluence.ident.Trajectory`

    :raises NonFinite: when the state leaves the ``BLOWUP_NORM`` ball

    """
    x0 = np.asarray(x0, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if x0.shape != (system.n_x,) or inputs.ndim != 2 or inputs.shape[1] != system.n_u:
        raise DataError(
            f"simulate: x0 {x0.shape} and inputs {inputs.shape} don't match "
            + f"(n_x, n_u) = ({system.n_x}, {system.n_u})"
        )

    T = inputs.shape[0]
    x = np.zeros((T, system.n_x))
    x_plus = np.zeros((T, system.n_x))
    state = x0
    for t in range(T):
        x[t] = state
        state = system.step(state, inputs[t])
        if rng is not None and system.sigma_w > 0:
            state = state + system.sigma_w * rng.standard_normal(system.n_x)
        if not np.all(np.isfinite(state)) or np.linalg.norm(state) > BLOWUP_NORM:
            raise NonFinite(
                f"trajectory {traj_id} blew up at step {t} (|x| > {BLOWUP_NORM:g})"
            )
        x_plus[t] = state
    return Trajectory(id=traj_id, x=x, u=inputs, x_plus=x_plus)


def simulate_from_stream(system, T, seed, stream, index, input_std=1.0, x0_std=1.0, traj_id=None):
    """Draw ``x0``, the inputs and the noise from one keyed stream and simulate."""
    rng = stream_rng(seed, stream, index)
    x0 = x0_std * rng.standard_normal(system.n_x)
    inputs = input_std * rng.standard_normal((T, system.n_u))
    return simulate(system, x0, inputs, rng=rng, traj_id=index if traj_id is None else traj_id)
