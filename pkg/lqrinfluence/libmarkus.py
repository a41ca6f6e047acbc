# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Markus metrics setup and the registry of every metric we emit."""

import logging
from pathlib import Path

import markus
from markus.filters import AddTagFilter, RegisteredMetricsFilter
import yaml


_IS_MARKUS_SET_UP = False

LOGGER = logging.getLogger(__name__)
METRICS = markus.get_metrics("lqrinfluence")

REGISTRY_PATH = Path(__file__).parent / "statsd_metrics.yaml"


def load_registered_metrics(path=REGISTRY_PATH):
    """Return ``{key: {"type": ..., "description": ...}}`` from the registry."""
    with open(path) as fp:
        return yaml.safe_load(fp)


STATSD_METRICS = load_registered_metrics()


def metrics_backends(statsd_host, statsd_port, debug=False):
    """Return the markus backend list for a run.

    No statsd host and no debug means metrics go nowhere.

    """
    backends = []
    if statsd_host:
        backends.append(
            {
                "class": "markus.backends.datadog.DatadogMetrics",
                "options": {"statsd_host": statsd_host, "statsd_port": statsd_port},
            }
        )
    if debug:
        backends.append(
            {
                "class": "markus.backends.logging.LoggingMetrics",
                "options": {"logger_name": "markus", "leader": "METRICS"},
            }
        )
    return backends


def set_up_metrics(statsd_host, statsd_port, hostname, debug=False):
    """Configure markus once per process.

    Solve and factorization counters double as checks on how much work the
    influence pipeline does, so debug runs log them and refuse any metric
    missing from ``statsd_metrics.yaml``.

    :arg statsd_host: statsd host; empty disables statsd
    :arg statsd_port: statsd port
    :arg hostname: added to every metric as a ``host`` tag
    :arg debug: log metrics and raise on unregistered ones

    """
    global _IS_MARKUS_SET_UP
    if _IS_MARKUS_SET_UP:
        return

    if debug:
        METRICS.filters.append(
            RegisteredMetricsFilter(registered_metrics=STATSD_METRICS, raise_error=True)
        )
    if hostname:
        METRICS.filters.append(AddTagFilter(f"host:{hostname}"))

    markus.configure(metrics_backends(statsd_host, statsd_port, debug=debug))
    _IS_MARKUS_SET_UP = True
