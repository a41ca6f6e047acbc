# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
Readers and writers for the files the command line produces.

Datasets, reports and ground truth are JSON lines: one header line followed by
one line per trajectory, keys sorted, floats in shortest round-trip form.
Wall-clock timings live in a ``<file>.timings.json`` sidecar so the main file
is byte-identical across reruns. Metrics tables are CSV.

See ``docs/fileformats.rst``.
"""

import csv
import dataclasses
import io
import json
import logging
from pathlib import Path

from lqrinfluence.bench.groundtruth import GroundTruth, TruthRecord
from lqrinfluence.bench.systems import system_from_record
from lqrinfluence.errors import DataError, MalformedFile
from lqrinfluence.ident import Dataset, Trajectory
from lqrinfluence.pipeline import (
    REPORT_VERSION,
    Diagnostics,
    InfluenceRecord,
    InfluenceReport,
    ModelSummary,
)
from lqrinfluence.util import atomic_write_text, json_ordered_dumps, utc_now_isoformat


LOGGER = logging.getLogger(__name__)

DATASET_VERSION = 1
GROUND_TRUTH_VERSION = 1

TRAIN = "train"
TEST = "test"

METRICS_COLUMNS = (
    "system",
    "target",
    "method",
    "pearson",
    "spearman",
    "mae",
    "topk",
    "time_s",
    "speedup",
)

ABLATION_COLUMNS = (
    "parameter",
    "value",
    "seed",
    "system",
    "target",
    "method",
    "pearson",
    "spearman",
    "mae",
    "topk",
    "n",
    "n_missing",
    "error",
)


@dataclasses.dataclass(frozen=True, eq=False)
class DatasetFile:
    """Contents of a dataset file."""

    train: Dataset
    test: Dataset
    seed: int
    family: str
    system: object = None


def _write_lines(path, lines):
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def _read_lines(path):
    """Yield ``(line number, parsed object)`` for every non-blank line."""
    try:
        with open(path, encoding="utf-8") as fp:
            text = fp.read()
    except OSError as exc:
        raise MalformedFile(f"can't read {path}: {exc.strerror or exc}") from exc

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            item = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedFile(f"{path}:{lineno}: not JSON: {exc.msg}") from exc
        if not isinstance(item, dict):
            raise MalformedFile(f"{path}:{lineno}: expected an object")
        yield lineno, item


def _header(path, lines, kind):
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    lineno, header = lines[0]
    if header.get("kind") != kind:
        raise MalformedFile(f"{path}:{lineno}: expected a {kind} header, got {header.get('kind')!r}")
    return header


def _known_fields(cls, item):
    """Drop keys ``cls`` doesn't know; newer writers may add fields."""
    names = {f.name for f in dataclasses.fields(cls)}
    return {key: value for key, value in item.items() if key in names}


def timings_path(path):
    path = Path(path)
    return path.with_name(path.name + ".timings.json")


def write_timings(path, timings):
    """Write the timings sidecar for ``path``."""
    atomic_write_text(
        timings_path(path),
        json_ordered_dumps({"created_at": utc_now_isoformat(), "timings": timings}) + "\n",
    )


def read_timings(path):
    """Return the sidecar timings of ``path``, or ``{}`` when there is none."""
    sidecar = timings_path(path)
    if not sidecar.exists():
        return {}
    try:
        data = json.loads(sidecar.read_text(encoding="utf-8"))
        return dict(data["timings"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        LOGGER.warning("ignoring unreadable timings file %s: %s", sidecar, exc)
        return {}


# Datasets


def _trajectory_line(tau, split):
    return json_ordered_dumps(
        {
            "kind": "trajectory",
            "split": split,
            "id": tau.id,
            "T": tau.T,
            "x": tau.x,
            "u": tau.u,
            "x_plus": tau.x_plus,
        }
    )


def write_dataset(path, train, test, seed, family, system=None):
    """Write training and test trajectories plus the true system."""
    header = {
        "kind": "header",
        "version": DATASET_VERSION,
        "n_x": train.n_x,
        "n_u": train.n_u,
        "N": train.N,
        "N_test": test.N,
        "seed": seed,
        "family": family,
        "system": system.to_record() if system is not None else None,
    }
    lines = [json_ordered_dumps(header)]
    lines.extend(_trajectory_line(tau, TRAIN) for tau in train)
    lines.extend(_trajectory_line(tau, TEST) for tau in test)
    _write_lines(path, lines)
    LOGGER.info("wrote dataset %s N=%d N_test=%d", path, train.N, test.N)


def read_dataset(path):
    """Read a dataset file.

    :returns: :py:class:`DatasetFile`

    :raises MalformedFile: on unreadable or malformed input
    :raises DataError: when the trajectories don't make valid datasets

    """
    lines = list(_read_lines(path))
    header = _header(path, lines, "header")
    try:
        n_x = int(header["n_x"])
        n_u = int(header["n_u"])
        expected = {TRAIN: int(header["N"]), TEST: int(header["N_test"])}
        seed = int(header["seed"])
        family = header["family"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"{path}:{lines[0][0]}: bad header: {exc}") from exc
    if header.get("version", DATASET_VERSION) > DATASET_VERSION:
        LOGGER.warning("%s has dataset version %s, reading what we know", path, header["version"])

    splits = {TRAIN: [], TEST: []}
    for lineno, item in lines[1:]:
        if item.get("kind") != "trajectory":
            continue
        split = item.get("split", TRAIN)
        if split not in splits:
            raise MalformedFile(f"{path}:{lineno}: unknown split {split!r}")
        try:
            tau = Trajectory(id=item["id"], x=item["x"], u=item["u"], x_plus=item["x_plus"])
        except KeyError as exc:
            raise MalformedFile(f"{path}:{lineno}: missing {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from exc
        except DataError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from exc
        if "T" in item and item["T"] != tau.T:
            raise MalformedFile(f"{path}:{lineno}: T={item['T']} but {tau.T} transitions")
        splits[split].append(tau)

    for split, count in expected.items():
        if len(splits[split]) != count:
            raise MalformedFile(f"{path}: header says {count} {split} trajectories, found {len(splits[split])}")

    system = header.get("system")
    return DatasetFile(
        train=Dataset(n_x=n_x, n_u=n_u, trajectories=tuple(splits[TRAIN])),
        test=Dataset(n_x=n_x, n_u=n_u, trajectories=tuple(splits[TEST])),
        seed=seed,
        family=family,
        system=system_from_record(system) if system else None,
    )


# Influence reports


def write_report(path, report):
    """Write an influence report and its timings sidecar."""
    header = {
        "kind": "report",
        "version": report.version,
        "summary": dataclasses.asdict(report.summary),
        "diagnostics": dataclasses.asdict(report.diagnostics),
    }
    lines = [json_ordered_dumps(header)]
    lines.extend(
        json_ordered_dumps({"kind": "record", **dataclasses.asdict(record)})
        for record in report.records
    )
    _write_lines(path, lines)
    write_timings(path, report.timings)
    LOGGER.info("wrote report %s with %d records", path, len(report.records))


def read_report(path):
    """Read an influence report.

    Unknown fields are ignored. Timings come from the sidecar if there is one.

    :returns: :py:class:`lqrinfluence.pipeline.InfluenceReport`

    """
    lines = list(_read_lines(path))
    header = _header(path, lines, "report")
    version = header.get("version", REPORT_VERSION)
    if version > REPORT_VERSION:
        LOGGER.warning("%s has report version %s, reading what we know", path, version)
    try:
        summary = ModelSummary(**_known_fields(ModelSummary, header["summary"]))
        diagnostics = Diagnostics(**_known_fields(Diagnostics, header.get("diagnostics", {})))
        records = tuple(
            InfluenceRecord(**_known_fields(InfluenceRecord, item))
            for _, item in lines[1:]
            if item.get("kind") == "record"
        )
    except (KeyError, TypeError) as exc:
        raise MalformedFile(f"{path}: bad report: {exc}") from exc
    return InfluenceReport(
        records=records,
        summary=summary,
        diagnostics=diagnostics,
        timings=read_timings(path),
        version=version,
    )


# Ground truth


def write_ground_truth(path, truth):
    """Write a ground-truth file; the sweep runtime goes to the sidecar."""
    header = {
        "kind": "ground_truth",
        "version": GROUND_TRUTH_VERSION,
        "pred_loss_full": truth.pred_loss_full,
        "nominal_cost_full": truth.nominal_cost_full,
        "plant_cost_full": truth.plant_cost_full,
        "plant_evaluated": truth.plant_evaluated,
        "missing": truth.missing,
    }
    lines = [json_ordered_dumps(header)]
    lines.extend(
        json_ordered_dumps({"kind": "record", **dataclasses.asdict(record)})
        for record in truth.records
    )
    _write_lines(path, lines)
    write_timings(path, {"retraining": truth.runtime_s})
    LOGGER.info("wrote ground truth %s with %d records", path, len(truth.records))


def read_ground_truth(path):
    """Read a ground-truth file.

    :returns: :py:class:`lqrinfluence.bench.groundtruth.GroundTruth`

    """
    lines = list(_read_lines(path))
    header = _header(path, lines, "ground_truth")
    try:
        records = tuple(
            TruthRecord(**_known_fields(TruthRecord, item))
            for _, item in lines[1:]
            if item.get("kind") == "record"
        )
        truth = GroundTruth(
            records=records,
            pred_loss_full=header["pred_loss_full"],
            nominal_cost_full=header.get("nominal_cost_full"),
            plant_cost_full=header.get("plant_cost_full"),
            plant_evaluated=bool(header.get("plant_evaluated", False)),
            runtime_s=read_timings(path).get("retraining"),
            missing=dict(header.get("missing", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"{path}: bad ground truth: {exc}") from exc
    return truth


# Tables


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(columns, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(column)) for column in columns])
    return buffer.getvalue()


def metrics_row(row):
    """Flatten a :py:class:`lqrinfluence.pipeline.EvalRow` into a dict."""
    m = row.metrics
    return {
        "system": row.system,
        "target": row.target,
        "method": row.method,
        "pearson": m.pearson,
        "spearman": m.spearman,
        "mae": m.mae,
        "topk": m.topk,
        "n": m.n,
        "n_missing": m.n_missing,
        "time_s": m.time_s,
        "speedup": m.speedup,
    }


def write_metrics_csv(path, rows):
    """Write evaluation rows as CSV with ``METRICS_COLUMNS``."""
    atomic_write_text(path, _csv_text(METRICS_COLUMNS, [metrics_row(row) for row in rows]))


def ablation_row(item):
    """Flatten a :py:class:`lqrinfluence.bench.ablation.AblationRow` into a dict."""
    flat = {"parameter": item.parameter, "value": item.value, "seed": item.seed, "error": item.error}
    if item.row is not None:
        flat.update(metrics_row(item.row))
    return flat


def write_ablation_csv(path, table):
    """Write the long-format ablation table; an empty table still gets a header."""
    atomic_write_text(path, _csv_text(ABLATION_COLUMNS, [ablation_row(item) for item in table]))
