# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

from everett import InvalidValueError
import pytest

from lqrinfluence.app import build_config_manager
from lqrinfluence.bench.ablation import AblationSettings, ablation_sweep, parse_parameter
from lqrinfluence.bench.experiment import ExperimentConfig
from lqrinfluence.bench.groundtruth import LotoRunner
from lqrinfluence.errors import ConfigError
from lqrinfluence.pipeline import InfluenceEngine


def components(values=None):
    config = build_config_manager(values)
    engine = InfluenceEngine(config.with_namespace("influence"))
    runner = LotoRunner(config.with_namespace("loto"))
    return engine, runner


BASE = ExperimentConfig(family="S1", n_traj=5, traj_len=10)


class TestAblationSweep:
    def test_no_values(self):
        engine, runner = components()
        assert ablation_sweep(BASE, "ridge_lambda", [], engine, runner) == []

    def test_lambda_grid(self):
        engine, runner = components()
        table = ablation_sweep(BASE, "ridge_lambda", ["1e-5", "1e-3", "1e-1"], engine, runner)
        assert {row.value for row in table} == {1e-5, 1e-3, 1e-1}
        assert all(row.error == "" for row in table)
        assert all(row.seed == 0 for row in table)
        assert all(row.parameter == "ridge_lambda" for row in table)
        assert all(row.row.system == "S1" for row in table)
        methods = {(row.value, row.row.target, row.row.method) for row in table}
        for value in (1e-5, 1e-3, 1e-1):
            assert (value, "nominal_cost", "if2") in methods
            assert (value, "pred_loss", "if1") in methods

    def test_seeds(self):
        engine, runner = components()
        table = ablation_sweep(BASE, "traj_len", [8], engine, runner, seeds=[1, 2])
        assert {row.seed for row in table} == {1, 2}
        assert {row.value for row in table} == {8}

    def test_failing_cell_is_recorded(self, metricsmock):
        engine, runner = components()
        with metricsmock as mm:
            table = ablation_sweep(BASE, "spectral_radius", ["1.5", "0.8"], engine, runner)
            assert len(mm.filter_records("incr", stat="lqrinfluence.bench.ablation_cell_error")) == 1
        failed = [row for row in table if row.error]
        assert len(failed) == 1
        assert failed[0].value == 1.5
        assert failed[0].row is None
        assert all(row.value == 0.8 for row in table if not row.error)

    def test_unknown_parameter(self):
        engine, runner = components()
        with pytest.raises(ConfigError):
            ablation_sweep(BASE, "q_scale", ["1.0"], engine, runner)

    def test_bad_value(self):
        engine, runner = components()
        with pytest.raises(ConfigError):
            ablation_sweep(BASE, "n_traj", ["many"], engine, runner)


class TestAblationSettings:
    def build(self, values=None):
        return AblationSettings(build_config_manager(values).with_namespace("ablation"))

    def test_defaults(self):
        settings = self.build()
        assert settings.parameter == "ridge_lambda"
        assert settings.values == []

    def test_configured(self):
        settings = self.build(
            {"ABLATION_PARAMETER": " Sigma_W ", "ABLATION_VALUES": "0.01, 0.03,,0.1"}
        )
        assert settings.parameter == "sigma_w"
        assert [value.strip() for value in settings.values] == ["0.01", "0.03", "0.1"]

    def test_bad_parameter(self):
        settings = self.build({"ABLATION_PARAMETER": "family"})
        with pytest.raises(InvalidValueError):
            assert settings.parameter

    @pytest.mark.parametrize("value", ["n_traj", "MISMATCH_STRENGTH"])
    def test_parse_parameter(self, value):
        assert parse_parameter(value) == value.lower()
