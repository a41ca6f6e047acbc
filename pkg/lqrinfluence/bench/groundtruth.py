# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
Ground truth by brute force: refit without each trajectory, then re-evaluate
the prediction loss, the nominal LQR cost and optionally the closed-loop cost
on the plant itself.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import statistics
import time

from everett.manager import Option
import numpy as np

from lqrinfluence.bench.systems import BLOWUP_NORM, PLANT_STREAM, stream_rng
from lqrinfluence.errors import AssumptionViolated, ConfigError, DataError
from lqrinfluence.daresens import design_lqr
from lqrinfluence.ident import fit_ridge, pred_loss
from lqrinfluence.libmarkus import METRICS
from lqrinfluence.lyapriccati import DEFAULT_OPTIONS, solve_dlyap_t


LOGGER = logging.getLogger(__name__)

#: Cost recorded for a rollout set in which some rollout blew up
DIVERGED_COST = 1e12


@dataclass(frozen=True)
class PlantCost:
    value: float
    diverged: bool = False
    n_diverged: int = 0


@dataclass(frozen=True)
class TruthRecord:
    """True deletion effects for one trajectory; None marks a missing entry."""

    traj_id: int
    delta_pred_loss: float
    delta_nominal_cost: float = None
    delta_plant_cost: float = None


@dataclass(frozen=True, eq=False)
class GroundTruth:
    records: tuple
    pred_loss_full: float
    nominal_cost_full: float = None
    plant_cost_full: float = None
    plant_evaluated: bool = False
    runtime_s: float = None
    missing: dict = field(default_factory=dict)

    @property
    def ids(self):
        return [record.traj_id for record in self.records]

    def column(self, target):
        """Return ``{traj_id: delta}`` for ``pred_loss``, ``nominal_cost`` or ``plant_cost``."""
        attr = f"delta_{target}"
        return {record.traj_id: getattr(record, attr) for record in self.records}


def closed_loop_cost(A, B, K, Q, R, Sigma0, horizon=None):
    """Expected cost of ``u = -K x`` on ``x+ = A x + B u`` from ``x0 ~ (0, Sigma0)``.

    With ``X`` solving ``X - A_cl^T X A_cl = Q + K^T R K`` the infinite-horizon
    cost is ``Tr(X Sigma0)``; truncating at ``horizon`` steps subtracts the
    tail ``Tr((A_cl^H)^T X A_cl^H Sigma0)``.

    """
    A_cl = A - B @ K
    X = solve_dlyap_t(A_cl, Q + K.T @ R @ K)
    if horizon is not None:
        power = np.linalg.matrix_power(A_cl, horizon)
        X = X - power.T @ X @ power
    return float(np.trace(X @ Sigma0))


def matched_initial_states(Sigma0, n_rollouts, seed):
    """Draw ``n_rollouts`` initial states whose second moment is exactly ``Sigma0``."""
    n_x = Sigma0.shape[0]
    if n_rollouts < n_x:
        raise ConfigError(f"need at least n_x={n_x} rollouts, got {n_rollouts}")
    Z = stream_rng(seed, PLANT_STREAM).standard_normal((n_rollouts, n_x))
    second_moment = Z.T @ Z / n_rollouts
    L = np.linalg.cholesky(second_moment)
    Z = np.linalg.solve(L, Z.T).T
    eigvals, eigvecs = np.linalg.eigh(0.5 * (Sigma0 + Sigma0.T))
    root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    return Z @ root.T


def plant_cost(system, K, Q, R, Sigma0, horizon=400, n_rollouts=64, seed=0):
    """Monte-Carlo closed-loop cost of ``u = -K x`` on the noise-free plant.

    The initial states come from the ``PLANT_STREAM`` of ``seed``, so every
    gain compared under one seed sees the same rollouts.

    :returns: :py:class:`PlantCost`; ``DIVERGED_COST`` with ``diverged`` set
        when any rollout leaves the ``BLOWUP_NORM`` ball

    """
    Sigma0 = np.asarray(Sigma0, dtype=np.float64)
    x = matched_initial_states(Sigma0, n_rollouts, seed)
    alive = np.ones(n_rollouts, dtype=bool)
    total = np.zeros(n_rollouts)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            u = -x @ K.T
            total += np.einsum("ri,ij,rj->r", x, Q, x) + np.einsum("ri,ij,rj->r", u, R, u)
            x = system.step(x, u)
            blown = ~np.all(np.isfinite(x), axis=1) | (np.linalg.norm(x, axis=1) > BLOWUP_NORM)
            if np.any(blown & alive):
                alive &= ~blown
                x[~alive] = 0.0

    n_diverged = int(np.sum(~alive))
    if n_diverged:
        METRICS.incr("bench.plant_rollout_diverged", value=n_diverged)
        LOGGER.warning("%d of %d plant rollouts diverged", n_diverged, n_rollouts)
        return PlantCost(value=DIVERGED_COST, diverged=True, n_diverged=n_diverged)
    return PlantCost(value=float(np.mean(total)))


def median_runtime(fun, repeats=5):
    """Return ``(median wall-clock seconds, last result)`` over ``repeats`` calls."""
    samples = []
    result = None
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        result = fun()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples), result


def _nominal_design(theta, Q, R, Sigma0, options):
    try:
        return design_lqr(theta, Q, R, Sigma0, options)
    except AssumptionViolated as exc:
        LOGGER.warning("design failed: %s", exc)
        return None


def loto_ground_truth(
    dataset,
    test,
    ridge_lambda,
    Q,
    R,
    Sigma0,
    system=None,
    plant=False,
    horizon=400,
    n_rollouts=64,
    seed=0,
    solver_options=None,
    threads=1,
    structured=True,
    plant_x0_scale=1.0,
):
    """Refit on every leave-one-trajectory-out dataset and measure the effects.

    A refit whose model can't be stabilized, or whose gain blows up the
    plant, leaves that entry missing; the sweep itself never aborts on it.

    :arg system: the plant, needed when ``plant`` is True
    :arg plant: also evaluate the closed-loop cost on ``system``
    :arg plant_x0_scale: plant rollouts start from ``plant_x0_scale**2 * Sigma0``
        and their costs are divided by ``plant_x0_scale**2``, so they stay
        comparable with the nominal cost of a linear plant
    :arg threads: refits run on this many threads; results don't depend on it

    :returns: :py:class:`GroundTruth`

    """
    dataset.require_loto()
    if plant and system is None:
        raise DataError("plant-level ground truth needs the true system")
    options = solver_options or DEFAULT_OPTIONS

    start = time.perf_counter()
    with METRICS.timer("bench.groundtruth.time"):
        full = fit_ridge(dataset, ridge_lambda, structured=structured)
        loss_full = pred_loss(full.theta_hat, test)
        design_full = _nominal_design(full.theta_hat, Q, R, Sigma0, options)
        J_full = design_full.J if design_full is not None else None
        plant_full = None
        spread = plant_x0_scale**2

        def _plant(K):
            cost = plant_cost(system, K, Q, R, spread * np.asarray(Sigma0), horizon, n_rollouts, seed)
            return None if cost.diverged else cost.value / spread

        if plant and design_full is not None:
            plant_full = _plant(design_full.K0)

        def _one(tau):
            refit = fit_ridge(dataset.without(tau.id), ridge_lambda, structured=structured)
            METRICS.incr("bench.retrain_fit")
            delta_pred = pred_loss(refit.theta_hat, test) - loss_full

            delta_J = delta_plant = None
            if J_full is not None:
                design = _nominal_design(refit.theta_hat, Q, R, Sigma0, options)
                if design is not None:
                    delta_J = design.J - J_full
                    if plant_full is not None:
                        cost = _plant(design.K0)
                        if cost is not None:
                            delta_plant = cost - plant_full
            return TruthRecord(
                traj_id=tau.id,
                delta_pred_loss=delta_pred,
                delta_nominal_cost=delta_J,
                delta_plant_cost=delta_plant,
            )

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                records = tuple(executor.map(_one, dataset.trajectories))
        else:
            records = tuple(_one(tau) for tau in dataset)
    runtime = time.perf_counter() - start

    missing = {"nominal_cost": sum(r.delta_nominal_cost is None for r in records)}
    if plant:
        missing["plant_cost"] = sum(r.delta_plant_cost is None for r in records)
    for target, count in missing.items():
        if count:
            METRICS.incr("bench.groundtruth.missing", value=count, tags=[f"target:{target}"])
            LOGGER.warning("%d of %d %s deltas are missing", count, len(records), target)

    LOGGER.info("ground truth N=%d plant=%s in %.3fs", dataset.N, plant, runtime)
    return GroundTruth(
        records=records,
        pred_loss_full=loss_full,
        nominal_cost_full=J_full,
        plant_cost_full=plant_full,
        plant_evaluated=plant,
        runtime_s=runtime,
        missing=missing,
    )


def parse_plant_x0_scale(value):
    """Parse a positive float or ``auto`` (returned as None)."""
    value = value.strip().lower()
    if value == "auto":
        return None
    parsed = float(value)
    if not parsed > 0:
        raise ValueError(f"{value!r} is not positive")
    return parsed


def parse_plant_mode(value):
    value = value.strip().lower()
    if value not in ("auto", "true", "false"):
        raise ValueError(f"{value!r} is not one of auto, true, false")
    return value


class LotoRunner:
    """Runs the brute-force retraining sweep.

    Plant-level costs are expensive; by default they're only computed when the
    plant differs from the identified model class (S4 or a nonzero mismatch)::

        loto_plant_cost: auto

    The arm is only compared near its hanging equilibrium, where the plant
    behaves like its linearisation; see ``plant_x0_scale``.

    """

    class Config:
        plant_cost = Option(
            default="auto",
            parser=parse_plant_mode,
            doc="Evaluate closed-loop cost on the true plant: auto, true or false.",
        )
        plant_horizon = Option(
            default="400", parser=int, doc="Rollout horizon for plant-level costs."
        )
        plant_rollouts = Option(
            default="64", parser=int, doc="Rollouts per plant-level cost evaluation."
        )
        plant_x0_scale = Option(
            default="auto",
            parser=parse_plant_x0_scale,
            doc=(
                "Initial-state spread of plant rollouts relative to Sigma0 (standard "
                "deviation scale); ``auto`` uses 0.1 for S4 and 1 otherwise."
            ),
        )
        threads = Option(default="1", parser=int, doc="Worker threads for the refits.")

    def __init__(self, config):
        self.config = config.with_options(self)

    def wants_plant(self, system):
        mode = self.config("plant_cost")
        if mode == "auto":
            if system is None:
                return False
            return not system.is_linear
        return mode == "true"

    def plant_x0_scale(self, experiment_config):
        scale = self.config("plant_x0_scale")
        return experiment_config.plant_scale if scale is None else scale

    def run(self, experiment_config, system, dataset, test, solver_options=None, threads=None, structured=True):
        """Run :py:func:`loto_ground_truth` for one experiment."""
        Q, R, Sigma0 = experiment_config.weights(dataset.n_x, dataset.n_u)
        return loto_ground_truth(
            dataset,
            test,
            experiment_config.ridge_lambda,
            Q,
            R,
            Sigma0,
            system=system,
            plant=self.wants_plant(system),
            horizon=self.config("plant_horizon"),
            n_rollouts=self.config("plant_rollouts"),
            seed=experiment_config.seed,
            solver_options=solver_options,
            threads=threads or self.config("threads"),
            structured=structured,
            plant_x0_scale=self.plant_x0_scale(experiment_config),
        )
