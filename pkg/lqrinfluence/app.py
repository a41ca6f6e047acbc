# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

import logging
from pathlib import Path
import socket

from everett import ConfigurationError
from everett.manager import ConfigDictEnv, ConfigManager, Option
from fillmore.libsentry import set_up_sentry
from fillmore.scrubber import SCRUB_RULES_DEFAULT, Scrubber
from sentry_sdk.integrations.atexit import AtexitIntegration
from sentry_sdk.integrations.dedupe import DedupeIntegration
from sentry_sdk.integrations.excepthook import ExcepthookIntegration
from sentry_sdk.integrations.modules import ModulesIntegration
from sentry_sdk.integrations.threading import ThreadingIntegration
import yaml

from lqrinfluence.bench.ablation import AblationSettings
from lqrinfluence.bench.experiment import ExperimentSettings
from lqrinfluence.bench.groundtruth import LotoRunner
from lqrinfluence.errors import ConfigError
from lqrinfluence.libdockerflow import get_release_name
from lqrinfluence.liblogging import known_keys, log_config, set_up_logging, traverse_tree
from lqrinfluence.libmarkus import METRICS, set_up_metrics
from lqrinfluence.pipeline import InfluenceEngine


LOGGER = logging.getLogger(__name__)


def count_sentry_scrub_error(msg):
    METRICS.incr("sentry_scrub_error", value=1, tags=["service:lqrinf"])


def configure_sentry(app_config):
    scrubber = Scrubber(
        rules=SCRUB_RULES_DEFAULT,
        error_handler=count_sentry_scrub_error,
    )
    set_up_sentry(
        sentry_dsn=app_config("secret_sentry_dsn"),
        release=get_release_name(app_config("basedir")),
        host_id=app_config("hostname"),
        # Disable frame-local variables; they hold whole datasets
        include_local_variables=False,
        # All integrations should be intentionally enabled
        default_integrations=False,
        integrations=[
            AtexitIntegration(),
            ExcepthookIntegration(),
            DedupeIntegration(),
            ModulesIntegration(),
            ThreadingIntegration(),
        ],
        # Scrub sensitive data
        before_send=scrubber,
    )


def _stringify(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_stringify(item) for item in value)
    return str(value)


def load_config_file(path):
    """Load a flat YAML run-config file.

    Keys are case-insensitive and may be written ``experiment_family`` or
    ``EXPERIMENT_FAMILY``. Lists become comma-separated values.

    :arg path: path to the file

    :returns: ``(values, lines)``: ``{UPPERCASE_KEY: str}`` and
        ``{UPPERCASE_KEY: line number}``

    :raises ConfigError: when the file can't be read or isn't a flat mapping

    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"can't read config file {path}: {exc.strerror or exc}") from exc

    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc

    if root is None:
        return {}, {}
    if not isinstance(root, yaml.MappingNode) or not isinstance(data, dict):
        raise ConfigError(f"{path}:{root.start_mark.line + 1}: expected a mapping of keys to values")

    lines = {}
    for key_node, value_node in root.value:
        key = str(key_node.value).upper()
        lineno = key_node.start_mark.line + 1
        if key in lines:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key_node.value!r}")
        if isinstance(value_node, yaml.MappingNode):
            raise ConfigError(f"{path}:{lineno}: {key_node.value!r} must be a scalar or a list")
        lines[key] = lineno

    values = {str(key).upper(): _stringify(value) for key, value in data.items()}
    return values, lines


def build_config_manager(values=None):
    """Build a config manager over explicit values only.

    The environment is never consulted, so a run is fully described by its
    config file and command-line flags.

    """
    return ConfigManager(
        environments=[ConfigDictEnv(values or {})],
        doc="For configuration help, see docs/configuration.rst.",
    )


class LqrInfluenceApp:
    """The command-line application and its component tree."""

    class Config:
        basedir = Option(
            default=str(Path(__file__).parent.parent),
            doc="The root directory for this application to find ``version.json``.",
        )
        logging_level = Option(
            default="INFO",
            doc="The logging level to use. DEBUG, INFO, WARNING, ERROR or CRITICAL",
        )
        local_dev_env = Option(
            default="False",
            parser=bool,
            doc="Log human-readable lines and echo metrics into the log.",
        )
        statsd_host = Option(
            default="", doc="Hostname for statsd server; empty disables statsd."
        )
        statsd_port = Option(default="8125", doc="Port for statsd server.", parser=int)
        secret_sentry_dsn = Option(
            default="",
            doc="Sentry DSN to report crashes to. If this is not set, nothing is sent.",
        )
        hostname = Option(
            default=socket.gethostname(),
            doc=(
                "Identifier for the host running the experiments. Shows up in the "
                "logs and as a metrics tag.\n"
                "\n"
                "If you do not set this, then ``socket.gethostname()`` is used instead."
            ),
        )

    def __init__(self, config_manager):
        self.config_manager = config_manager
        self.config = config_manager.with_options(self)

        self.experiment = ExperimentSettings(config_manager.with_namespace("experiment"))
        self.influence = InfluenceEngine(config_manager.with_namespace("influence"))
        self.loto = LotoRunner(config_manager.with_namespace("loto"))
        self.ablation = AblationSettings(config_manager.with_namespace("ablation"))

    def get_components(self):
        """Return map of namespace -> component for traversing component tree."""
        return {
            "experiment": self.experiment,
            "influence": self.influence,
            "loto": self.loto,
            "ablation": self.ablation,
        }

    def check_keys(self, values, lines=None, source="config"):
        """Reject keys no component knows about.

        :raises ConfigError: naming the first unknown key and its line

        """
        lines = lines or {}
        allowed = known_keys(self)
        unknown = sorted(
            (key for key in values if key not in allowed), key=lambda key: lines.get(key, 0)
        )
        if unknown:
            key = unknown[0]
            where = f"{source}:{lines[key]}" if key in lines else source
            raise ConfigError(f"{where}: unknown key {key}")

    def setup(self):
        # Log runtime configuration
        log_config(LOGGER, self.config_manager, self)

        set_up_metrics(
            statsd_host=self.config("statsd_host"),
            statsd_port=self.config("statsd_port"),
            hostname=self.config("hostname"),
            debug=self.config("local_dev_env"),
        )

    def verify(self):
        """Parse every option now so bad values fail before any compute."""
        for _, key, _, component in traverse_tree(self):
            component.config(key)
        LOGGER.debug("seeds %s", self.experiment.seeds)
        LOGGER.debug("verification complete")

    def experiment_config(self, seed=None, **changes):
        """The :py:class:`lqrinfluence.bench.experiment.ExperimentConfig` for this run."""
        config = self.experiment.experiment_config(
            seed=seed, **self.influence.design_settings()
        )
        if changes:
            config = config.replace(**changes)
        return config


def get_app(config_path=None, overrides=None):
    """Build, configure and verify the application.

    :arg config_path: path of a run-config file, or None for defaults
    :arg overrides: ``{UPPERCASE_KEY: str}`` applied on top of the file

    :returns: :py:class:`LqrInfluenceApp`

    :raises ConfigError: on unreadable files, unknown keys or bad values

    """
    values, lines = ({}, {})
    if config_path is not None:
        values, lines = load_config_file(config_path)
    values.update(overrides or {})

    try:
        config_manager = build_config_manager(values)
        app_config = config_manager.with_options(LqrInfluenceApp)

        # Set up logging and sentry first, so we have something to log to. Then
        # build and log everything else.
        set_up_logging(
            logging_level=app_config("logging_level"),
            debug=app_config("local_dev_env"),
            host_id=app_config("hostname"),
            processname="lqrinf",
        )
        if app_config("secret_sentry_dsn"):
            configure_sentry(app_config)

        app = LqrInfluenceApp(config_manager)
        app.check_keys(values, lines, source=str(config_path or "config"))
        app.setup()
        app.verify()
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc
    return app
