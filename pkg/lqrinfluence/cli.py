# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
Command line for generating datasets, scoring them, retraining and evaluating.

Exit codes: 0 success, 2 configuration, 3 data, 4 numerics, 5 the identified
model can't be stabilized (the report is still written).
"""

import functools
import logging

import click

from lqrinfluence import __version__
from lqrinfluence.app import get_app
from lqrinfluence.bench.ablation import ablation_sweep
from lqrinfluence.bench.experiment import FAMILY_DEFAULTS, generate_experiment
from lqrinfluence.errors import AssumptionViolated, LqrInfluenceError
from lqrinfluence.fileformats import (
    read_dataset,
    read_ground_truth,
    read_report,
    write_ablation_csv,
    write_dataset,
    write_ground_truth,
    write_metrics_csv,
    write_report,
)
from lqrinfluence.pipeline import evaluate
from lqrinfluence.util import build_table


LOGGER = logging.getLogger(__name__)


def _overrides(seed, threads):
    overrides = {}
    if seed is not None:
        overrides["EXPERIMENT_SEEDS"] = str(seed)
    if threads is not None:
        overrides["LOTO_THREADS"] = str(threads)
    return overrides


def common_options(fun):
    """Add ``--config``, ``--seed`` and ``--threads`` and build the app."""

    @click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False),
        default=None,
        help="Run-config YAML file; defaults apply when omitted.",
    )
    @click.option("--seed", type=int, default=None, help="Overrides EXPERIMENT_SEEDS.")
    @click.option(
        "--threads",
        type=click.IntRange(min=1),
        default=None,
        help="Worker threads; overrides LOTO_THREADS.",
    )
    @functools.wraps(fun)
    def _wrapped(config_path, seed, threads, **kwargs):
        try:
            app = get_app(config_path, _overrides(seed, threads))
            return fun(app=app, threads=app.loto.config("threads"), **kwargs)
        except LqrInfluenceError as exc:
            LOGGER.debug("exiting with %d", exc.exit_code, exc_info=True)
            click.echo(f"lqrinf: error: {exc}", err=True)
            raise SystemExit(exc.exit_code) from exc

    return _wrapped


def _dataset_config(app, dataset_file):
    """Experiment config matching a dataset file's family and seed."""
    changes = {}
    if dataset_file.family in FAMILY_DEFAULTS:
        changes["family"] = dataset_file.family
    return app.experiment_config(seed=dataset_file.seed, **changes)


def _table_lines(rows):
    def _fmt(value, spec):
        return "" if value is None else format(value, spec)

    table = [("system", "target", "method", "pearson", "spearman", "mae", "topk", "time_s", "speedup")]
    for row in rows:
        m = row.metrics
        table.append(
            (
                row.system,
                row.target,
                row.method,
                _fmt(m.pearson, ".3f"),
                _fmt(m.spearman, ".3f"),
                _fmt(m.mae, ".3g"),
                _fmt(m.topk, ".2f"),
                _fmt(m.time_s, ".3g"),
                _fmt(m.speedup, ".1f"),
            )
        )
    return build_table(table)


@click.group()
@click.version_option(version=__version__, prog_name="lqrinf")
def lqrinf():
    """Trajectory influence scores for identification and LQR design."""


@lqrinf.command()
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Dataset file to write.")
@common_options
def generate(app, threads, out):
    """Simulate training and held-out test trajectories."""
    config = app.experiment_config()
    experiment = generate_experiment(config)
    write_dataset(out, experiment.train, experiment.test, config.seed, config.family, experiment.system)
    click.echo(f"wrote {experiment.train.N} training and {experiment.test.N} test trajectories to {out}")


@lqrinf.command()
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Report file to write.")
@common_options
def influence(app, threads, dataset, out):
    """Compute influence scores for every trajectory in DATASET."""
    dataset_file = read_dataset(dataset)
    config = _dataset_config(app, dataset_file)
    report = app.influence.run(config, dataset_file.train, dataset_file.test, threads=threads)
    write_report(out, report)
    click.echo(f"wrote {len(report.records)} records to {out}")

    if report.diagnostics.assumption_violated:
        raise AssumptionViolated(report.diagnostics.message, rho=report.diagnostics.rho_cl)


@lqrinf.command()
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Ground-truth file to write.")
@common_options
def loto(app, threads, dataset, out):
    """Retrain without each trajectory in DATASET and record the true effects."""
    dataset_file = read_dataset(dataset)
    config = _dataset_config(app, dataset_file)
    truth = app.loto.run(
        config,
        dataset_file.system,
        dataset_file.train,
        dataset_file.test,
        solver_options=app.influence.solver_options(),
        threads=threads,
        structured=app.influence.structured,
    )
    write_ground_truth(out, truth)
    click.echo(f"wrote {len(truth.records)} records to {out} in {truth.runtime_s:.3f}s")


@lqrinf.command("evaluate")
@click.argument("report", type=click.Path(dir_okay=False))
@click.argument("truth", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Metrics CSV to write.")
@click.option("--system", "system_label", default="", help="Label for the system column.")
@common_options
def evaluate_cmd(app, threads, report, truth, out, system_label):
    """Compare REPORT scores with TRUTH deltas."""
    rows = evaluate(read_report(report), read_ground_truth(truth), system=system_label)
    if out:
        write_metrics_csv(out, rows)
    if rows:
        for line in _table_lines(rows):
            click.echo(line)
    else:
        click.echo("no rows with enough usable pairs")


@lqrinf.command()
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Long-format CSV to write.")
@common_options
def ablate(app, threads, out):
    """Sweep ABLATION_PARAMETER over ABLATION_VALUES for every seed."""
    table = ablation_sweep(
        app.experiment_config(),
        app.ablation.parameter,
        app.ablation.values,
        app.influence,
        app.loto,
        seeds=app.experiment.seeds,
        threads=threads,
    )
    write_ablation_csv(out, table)
    failed = sum(1 for item in table if item.error)
    click.echo(f"wrote {len(table)} rows to {out}, {failed} failed cells")
    if table and failed == len(table):
        raise LqrInfluenceError("every ablation cell failed")


def main():
    lqrinf()


if __name__ == "__main__":
    main()
