# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

from dataclasses import dataclass, replace
import logging
import math

from everett.manager import ListOf, Option
import numpy as np

from lqrinfluence.bench.systems import (
    FAMILIES,
    TEST_STREAM,
    TRAIN_STREAM,
    make_system,
    simulate_from_stream,
)
from lqrinfluence.errors import ConfigError
from lqrinfluence.ident import Dataset


LOGGER = logging.getLogger(__name__)

#: ``(N, T)`` per family when the config says ``auto``
FAMILY_DEFAULTS = {
    "S1": (30, 25),
    "S2": (50, 30),
    "S3": (80, 30),
    "S4": (50, 30),
}

#: initial-state spread of plant-level rollouts, relative to Sigma0; the arm
#: is only close to its linearisation within about 0.1 rad of hanging
FAMILY_PLANT_X0_SCALE = {"S4": 0.1}


def parse_family(value):
    family = value.strip().upper()
    if family not in FAMILIES:
        raise ValueError(f"{value!r} is not one of {', '.join(FAMILIES)}")
    return family


def parse_auto_int(value):
    """Parse a positive integer or ``auto`` (returned as None)."""
    value = value.strip().lower()
    if value == "auto":
        return None
    parsed = int(value)
    if parsed < 1:
        raise ValueError(f"{value!r} is not a positive integer")
    return parsed


def parse_optional_float(value):
    value = value.strip()
    if value == "":
        return None
    return float(value)


def parse_nonnegative_float(value):
    parsed = float(value)
    if not parsed >= 0:
        raise ValueError(f"{value!r} is negative")
    return parsed


def parse_fraction(value):
    parsed = float(value)
    if not 0 < parsed < 1:
        raise ValueError(f"{value!r} is not in (0, 1)")
    return parsed


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to regenerate one experiment from scratch.

    ``n_traj``, ``traj_len`` and ``plant_x0_scale`` of None pick the family
    defaults.

    """

    family: str = "S1"
    seed: int = 0
    n_traj: int = None
    traj_len: int = None
    sigma_w: float = 0.03
    test_fraction: float = 0.2
    s3_size: int = 8
    spectral_radius: float = None
    mismatch_strength: float = 0.0
    input_std: float = 1.0
    x0_std: float = 1.0
    ridge_lambda: float = 1e-5
    q_scale: float = 1.0
    r_scale: float = 0.1
    sigma0_scale: float = 1.0
    plant_x0_scale: float = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.n_traj is not None and self.n_traj < 2:
            raise ConfigError(f"n_traj must be at least 2, got {self.n_traj}")
        if self.traj_len is not None and self.traj_len < 1:
            raise ConfigError(f"traj_len must be positive, got {self.traj_len}")
        if not self.ridge_lambda > 0:
            raise ConfigError(f"ridge_lambda must be positive, got {self.ridge_lambda}")
        if self.r_scale <= 0 or self.q_scale < 0 or self.sigma0_scale < 0:
            raise ConfigError("r_scale must be positive, q_scale and sigma0_scale non-negative")
        if self.plant_x0_scale is not None and not self.plant_x0_scale > 0:
            raise ConfigError(f"plant_x0_scale must be positive, got {self.plant_x0_scale}")

    @property
    def N(self):
        return self.n_traj if self.n_traj is not None else FAMILY_DEFAULTS[self.family][0]

    @property
    def T(self):
        return self.traj_len if self.traj_len is not None else FAMILY_DEFAULTS[self.family][1]

    @property
    def plant_scale(self):
        """Standard-deviation scale of plant rollout initial states."""
        if self.plant_x0_scale is not None:
            return self.plant_x0_scale
        return FAMILY_PLANT_X0_SCALE.get(self.family, 1.0)

    @property
    def n_test(self):
        return max(2, math.ceil(self.test_fraction * self.N))

    def weights(self, n_x, n_u):
        """Return ``(Q, R, Sigma0)``."""
        return (
            self.q_scale * np.eye(n_x),
            self.r_scale * np.eye(n_u),
            self.sigma0_scale * np.eye(n_x),
        )

    def replace(self, **changes):
        return replace(self, **changes)

    def make_system(self):
        return make_system(
            self.family,
            seed=self.seed,
            size=self.s3_size,
            sigma_w=self.sigma_w,
            spectral_radius_target=self.spectral_radius,
            mismatch_strength=self.mismatch_strength,
        )


@dataclass(frozen=True, eq=False)
class Experiment:
    config: ExperimentConfig
    system: object
    train: Dataset
    test: Dataset


def generate_experiment(config):
    """Simulate the training set and the held-out test set for ``config``.

    Training trajectory ``k`` comes from stream ``(seed, TRAIN_STREAM, k)`` and
    test trajectory ``j`` from ``(seed, TEST_STREAM, j)``. Test ids continue
    after the training ids.

    """
    system = config.make_system()

    def _simulate(stream, index, traj_id):
        return simulate_from_stream(
            system,
            config.T,
            config.seed,
            stream,
            index,
            input_std=config.input_std,
            x0_std=config.x0_std,
            traj_id=traj_id,
        )

    train = [_simulate(TRAIN_STREAM, k, k) for k in range(config.N)]
    test = [_simulate(TEST_STREAM, j, config.N + j) for j in range(config.n_test)]
    LOGGER.info(
        "generated %s seed=%d N=%d T=%d n_test=%d",
        config.family,
        config.seed,
        config.N,
        config.T,
        config.n_test,
    )
    return Experiment(
        config=config,
        system=system,
        train=Dataset(n_x=system.n_x, n_u=system.n_u, trajectories=tuple(train)),
        test=Dataset(n_x=system.n_x, n_u=system.n_u, trajectories=tuple(test)),
    )


class ExperimentSettings:
    """Experiment generation settings.

    Every run starts from these. For example, to run S3 at the larger size
    with a noisier plant::

        experiment_family: S3
        experiment_s3_size: 10
        experiment_sigma_w: 0.05

    """

    class Config:
        family = Option(
            default="S1", parser=parse_family, doc="System family: S1, S2, S3 or S4."
        )
        n_traj = Option(
            default="auto",
            parser=parse_auto_int,
            doc="Number of training trajectories; ``auto`` uses 30/50/80/50 for S1-S4.",
        )
        traj_len = Option(
            default="auto",
            parser=parse_auto_int,
            doc="Transitions per trajectory; ``auto`` uses 25 for S1 and 30 otherwise.",
        )
        sigma_w = Option(
            default="0.03",
            parser=parse_nonnegative_float,
            doc="Process noise standard deviation.",
        )
        test_fraction = Option(
            default="0.2",
            parser=parse_fraction,
            doc="Held-out test trajectories as a fraction of N (at least 2).",
        )
        s3_size = Option(default="8", parser=int, doc="S3 state dimension: 8 or 10.")
        spectral_radius = Option(
            default="",
            parser=parse_optional_float,
            doc="Rescale the true A to this spectral radius (linear families only).",
        )
        mismatch_strength = Option(
            default="0",
            parser=parse_nonnegative_float,
            doc="Strength of the ``eps * tanh(x)`` plant nonlinearity (linear families).",
        )
        seeds = Option(
            default="0",
            parser=ListOf(int),
            doc="Comma-separated seeds. Single-run commands use the first one.",
        )
        input_std = Option(
            default="1.0",
            parser=parse_nonnegative_float,
            doc="Standard deviation of the i.i.d. Gaussian excitation.",
        )
        x0_std = Option(
            default="1.0",
            parser=parse_nonnegative_float,
            doc="Standard deviation of the Gaussian initial states.",
        )

    def __init__(self, config):
        self.config = config.with_options(self)

    @property
    def seeds(self):
        seeds = self.config("seeds")
        if not seeds:
            raise ConfigError("EXPERIMENT_SEEDS must list at least one seed")
        return seeds

    def experiment_config(self, seed=None, **design):
        """Return an :py:class:`ExperimentConfig`.

        :arg seed: overrides the first configured seed
        :arg design: ``ridge_lambda``, ``q_scale``, ``r_scale``, ``sigma0_scale``

        """
        if seed is None:
            seed = self.seeds[0]
        return ExperimentConfig(
            family=self.config("family"),
            seed=seed,
            n_traj=self.config("n_traj"),
            traj_len=self.config("traj_len"),
            sigma_w=self.config("sigma_w"),
            test_fraction=self.config("test_fraction"),
            s3_size=self.config("s3_size"),
            spectral_radius=self.config("spectral_radius"),
            mismatch_strength=self.config("mismatch_strength"),
            input_std=self.config("input_std"),
            x0_std=self.config("x0_std"),
            **design,
        )
