# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

from pathlib import Path
import sys

from markus.testing import MetricsMock
import numpy as np
import pytest


# Add repository root so we can import lqrinfluence and testlib.
REPO_ROOT = Path(__file__).parent.parent.resolve()
sys.path.insert(0, str(REPO_ROOT))


from lqrinfluence.app import LqrInfluenceApp, build_config_manager  # noqa
from lqrinfluence.liblogging import set_up_logging  # noqa
from lqrinfluence.libmarkus import set_up_metrics  # noqa


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run the slow statistical and timing tests",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long statistical or timing run")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def pytest_sessionstart():
    config = build_config_manager().with_options(LqrInfluenceApp)

    # Make sure we set up logging and metrics; debug mode makes unregistered
    # metrics raise
    set_up_logging(
        logging_level="DEBUG",
        debug=True,
        host_id=config("hostname"),
        processname="lqrinf",
    )
    set_up_metrics(
        statsd_host="",
        statsd_port=config("statsd_port"),
        hostname=config("hostname"),
        debug=True,
    )


@pytest.fixture
def metricsmock():
    """Returns MetricsMock that a context to record metrics records

    Usage::

        def test_something(metricsmock):
            with metricsmock as mm:
                # do stuff
                assert mm.has_record(
                    stat='some.stat',
                    kwargs_contains={
                        'something': 1
                    }
                )

    """
    return MetricsMock()


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same draws."""
    return np.random.default_rng(20260)


@pytest.fixture
def write_config(tmp_path):
    """Returns a function that writes a run-config file and returns its path.

    Usage::

        def test_something(write_config):
            path = write_config("experiment_family: S2\\n")

    """

    def _write_config(text, name="run.yaml"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return _write_config
