# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
Logging setup plus helpers that walk the configuration component tree.
"""

import logging
import logging.config
import socket

from everett.manager import (
    generate_uppercase_key,
    get_config_for_class,
    get_runtime_config,
)


_IS_LOGGING_SET_UP = False

LOGGER = logging.getLogger(__name__)

TEXT_FORMAT = "%(asctime)s %(levelname)s - %(processname)s - %(name)s - %(message)s"

# Libraries that are chatty at INFO
QUIET_LOGGERS = ("fillmore", "markus")


class ProcessContextFilter(logging.Filter):
    """Stamps every record with the host id and process name."""

    def __init__(self, host_id, processname):
        super().__init__()
        self.host_id = host_id
        self.processname = processname

    def filter(self, record):
        record.host_id = self.host_id
        record.processname = self.processname
        return True


def logging_config(logging_level, debug=False, host_id=None, processname=None):
    """Build the ``dictConfig`` dict for a run.

    Everything goes to stderr; stdout is reserved for the tables the command
    line prints. Debug runs get readable text lines and metrics in the log.
    Other runs get one JSON object per line.

    """
    formatter = "text" if debug else "json"
    levels = {name: {"level": logging.ERROR} for name in QUIET_LOGGERS}
    if debug:
        levels["markus"] = {"level": logging.INFO}
    levels["lqrinfluence"] = {"level": logging_level}

    return {
        "version": 1,
        "disable_existing_loggers": True,
        "filters": {
            "context": {
                "()": ProcessContextFilter,
                "host_id": host_id or socket.gethostname(),
                "processname": processname or "lqrinf",
            },
        },
        "formatters": {
            "text": {"format": TEXT_FORMAT},
            "json": {
                "()": "dockerflow.logging.JsonLogFormatter",
                "logger_name": "lqrinfluence",
            },
        },
        "handlers": {
            "stderr": {
                "level": "DEBUG",
                "class": "logging.StreamHandler",
                "formatter": formatter,
                "filters": ["context"],
                "stream": "ext://sys.stderr",
            },
        },
        "loggers": levels,
        "root": {"handlers": ["stderr"], "level": "WARNING"},
    }


def set_up_logging(logging_level, debug=False, host_id=None, processname=None):
    """Configure Python logging once per process; later calls are ignored.

    :arg logging_level: level for the ``lqrinfluence`` loggers
    :arg debug: log readable text instead of JSON
    :arg host_id: the host id to log
    :arg processname: the process name to log

    """
    global _IS_LOGGING_SET_UP
    if _IS_LOGGING_SET_UP:
        return

    logging.config.dictConfig(
        logging_config(logging_level, debug=debug, host_id=host_id, processname=processname)
    )
    LOGGER.info("set up logging logging_level=%s debug=%s", logging_level, debug)
    _IS_LOGGING_SET_UP = True


def traverse_tree(instance, namespace=None):
    """Collect the options of a component and of everything under it.

    Branches come from ``get_components()``, so a backend's options only
    show up once that backend is selected.

    :arg instance: the component to start at
    :arg namespace: list of namespace strings leading to ``instance``

    :returns: list of ``(namespace, key, option, component)``

    """
    namespace = list(namespace or [])
    found = [
        (namespace, key, option, instance)
        for key, (option, _) in get_config_for_class(type(instance)).items()
    ]
    for child_ns, child in getattr(instance, "get_components", dict)().items():
        found.extend(traverse_tree(child, namespace + [child_ns]))
    return found


def full_key(namespace, key):
    return generate_uppercase_key(key, namespace).upper()


def known_keys(component):
    """Return the uppercase keys the component tree under ``component`` accepts."""
    return {full_key(ns, key) for ns, key, _, _ in traverse_tree(component)}


def log_config(logger, config, component):
    """Log every resolved option under ``component`` as ``KEY=value``.

    Keys containing "secret" are masked.

    """
    for ns, key, value, _ in get_runtime_config(
        config=config, component=component, traverse=traverse_tree
    ):
        key_name = full_key(ns, key)
        shown = value or ""
        if shown and "SECRET" in key_name:
            shown = "*****"
        logger.info("%s=%s", key_name, shown)
