# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

from dataclasses import dataclass
import logging

from everett.manager import ListOf, Option

from lqrinfluence.bench.experiment import generate_experiment
from lqrinfluence.errors import ConfigError, LqrInfluenceError
from lqrinfluence.libmarkus import METRICS


LOGGER = logging.getLogger(__name__)

#: sweepable :py:class:`ExperimentConfig` fields and their value parsers
PARAMETERS = {
    "n_traj": int,
    "traj_len": int,
    "sigma_w": float,
    "ridge_lambda": float,
    "spectral_radius": float,
    "mismatch_strength": float,
}


@dataclass(frozen=True)
class AblationRow:
    """One line of the long-format table.

    ``row`` is None for a cell that failed; ``error`` then says why.

    """

    parameter: str
    value: object
    seed: int
    row: object = None
    error: str = ""


def parse_parameter(value):
    value = value.strip().lower()
    if value not in PARAMETERS:
        raise ValueError(f"{value!r} is not one of {', '.join(sorted(PARAMETERS))}")
    return value


def ablation_sweep(base_config, parameter, values, engine, runner, seeds=None, threads=1):
    """Run influence scoring and ground truth for every ``(value, seed)`` cell.

    A cell that fails is recorded with its error and the sweep moves on.

    :arg base_config: :py:class:`lqrinfluence.bench.experiment.ExperimentConfig`
    :arg parameter: one of ``PARAMETERS``
    :arg values: values to sweep; strings are parsed
    :arg engine: :py:class:`lqrinfluence.pipeline.InfluenceEngine`
    :arg runner: :py:class:`lqrinfluence.bench.groundtruth.LotoRunner`
    :arg seeds: seeds per value; defaults to the base config's seed

    :returns: list of :py:class:`AblationRow`

    """
    # imported here, pipeline imports from bench
    from lqrinfluence.pipeline import evaluate

    if parameter not in PARAMETERS:
        raise ConfigError(f"can't sweep {parameter!r}")
    parse = PARAMETERS[parameter]
    seeds = list(seeds) if seeds else [base_config.seed]

    table = []
    for raw in values:
        try:
            value = parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad {parameter} value {raw!r}: {exc}") from exc

        for seed in seeds:
            LOGGER.info("ablation cell %s=%s seed=%d", parameter, value, seed)
            try:
                config = base_config.replace(seed=seed, **{parameter: value})
                experiment = generate_experiment(config)
                report = engine.run(config, experiment.train, experiment.test, threads=threads)
                truth = runner.run(
                    config,
                    experiment.system,
                    experiment.train,
                    experiment.test,
                    solver_options=engine.solver_options(),
                    threads=threads,
                    structured=engine.structured,
                )
                rows = evaluate(report, truth, system=config.family)
            except LqrInfluenceError as exc:
                METRICS.incr("bench.ablation_cell_error")
                LOGGER.warning("ablation cell %s=%s seed=%d failed: %s", parameter, value, seed, exc)
                table.append(AblationRow(parameter=parameter, value=value, seed=seed, error=str(exc)))
                continue

            table.extend(
                AblationRow(parameter=parameter, value=value, seed=seed, row=row) for row in rows
            )
    return table


class AblationSettings:
    """The sweep ``lqrinf ablate`` runs.

    For example, the regularization sweep::

        ablation_parameter: ridge_lambda
        ablation_values: [1e-7, 1e-5, 1e-3]

    Every value runs once per seed in ``experiment_seeds``.

    """

    class Config:
        parameter = Option(
            default="ridge_lambda",
            parser=parse_parameter,
            doc=f"Experiment field to sweep: {', '.join(sorted(PARAMETERS))}.",
        )
        values = Option(
            default="",
            parser=ListOf(str),
            doc="Comma-separated values of the swept field. Empty runs nothing.",
        )

    def __init__(self, config):
        self.config = config.with_options(self)

    @property
    def parameter(self):
        return self.config("parameter")

    @property
    def values(self):
        return [value for value in self.config("values") if value.strip()]
