# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

from everett import InvalidValueError
import numpy as np
import pytest

from lqrinfluence.app import build_config_manager
from lqrinfluence.bench import groundtruth
from lqrinfluence.bench.experiment import ExperimentConfig, generate_experiment
from lqrinfluence.bench.groundtruth import (
    DIVERGED_COST,
    LotoRunner,
    closed_loop_cost,
    loto_ground_truth,
    matched_initial_states,
    median_runtime,
    plant_cost,
)
from lqrinfluence.bench.systems import LinearSystem, make_system
from lqrinfluence.daresens import design_lqr
from lqrinfluence.errors import AssumptionViolated, ConfigError, DataError
from lqrinfluence.ident import ParamVector, exact_loto, exact_pred_delta, fit_ridge
from lqrinfluence.lyapriccati import solve_dlyap_t
from testlib.datasets import random_dataset
from testlib.oracles import random_spd, random_stable


def linear_plant(seed=0, n_x=3, n_u=2, rho=0.8):
    rng = np.random.default_rng(seed)
    A = random_stable(rng, n_x, rho=rho)
    B = rng.standard_normal((n_x, n_u))
    return LinearSystem(A_true=A, B_true=B), rng


class TestClosedLoopCost:
    def test_open_loop_is_lyapunov(self):
        system, rng = linear_plant()
        Q = random_spd(rng, 3)
        Sigma0 = random_spd(rng, 3)
        K = np.zeros((2, 3))
        expected = np.trace(solve_dlyap_t(system.A_true, Q) @ Sigma0)
        cost = closed_loop_cost(system.A_true, system.B_true, K, Q, np.eye(2), Sigma0)
        assert cost == pytest.approx(expected, rel=1e-12)

    def test_matches_nominal_cost_at_lqr_gain(self):
        system, _ = linear_plant(seed=1)
        design = design_lqr(
            _theta(system), np.eye(3), 0.1 * np.eye(2), np.eye(3)
        )
        cost = closed_loop_cost(
            system.A_true, system.B_true, design.K0, np.eye(3), 0.1 * np.eye(2), np.eye(3)
        )
        assert cost == pytest.approx(design.J, rel=1e-9)

    def test_horizon_truncation(self):
        system, _ = linear_plant(seed=2)
        K = np.zeros((2, 3))
        full = closed_loop_cost(system.A_true, system.B_true, K, np.eye(3), np.eye(2), np.eye(3))
        short = closed_loop_cost(
            system.A_true, system.B_true, K, np.eye(3), np.eye(2), np.eye(3), horizon=1
        )
        # one step from x0 ~ (0, I) costs Tr(Q Sigma0)
        assert short == pytest.approx(3.0, rel=1e-12)
        assert short < full


def _theta(system):
    return ParamVector.from_matrices(system.A_true, system.B_true)


class TestMatchedInitialStates:
    def test_second_moment_is_exact(self, rng):
        Sigma0 = random_spd(rng, 4)
        X = matched_initial_states(Sigma0, 32, seed=3)
        assert X.shape == (32, 4)
        np.testing.assert_allclose(X.T @ X / 32, Sigma0, rtol=1e-10, atol=1e-12)

    def test_common_random_numbers(self):
        a = matched_initial_states(np.eye(2), 8, seed=1)
        b = matched_initial_states(np.eye(2), 8, seed=1)
        np.testing.assert_array_equal(a, b)

    def test_too_few_rollouts(self):
        with pytest.raises(ConfigError):
            matched_initial_states(np.eye(4), 3, seed=0)


class TestPlantCost:
    def test_linear_plant_matches_truncated_analytic_cost(self):
        system, _ = linear_plant(seed=4)
        Q, R, Sigma0 = np.eye(3), 0.1 * np.eye(2), np.eye(3)
        design = design_lqr(_theta(system), Q, R, Sigma0)
        cost = plant_cost(system, design.K0, Q, R, Sigma0, horizon=400, n_rollouts=16)
        analytic = closed_loop_cost(
            system.A_true, system.B_true, design.K0, Q, R, Sigma0, horizon=400
        )
        assert not cost.diverged
        assert cost.value == pytest.approx(analytic, rel=1e-9)

    def test_long_horizon_near_nominal(self):
        system, _ = linear_plant(seed=5, rho=0.7)
        Q, R, Sigma0 = np.eye(3), 0.1 * np.eye(2), np.eye(3)
        design = design_lqr(_theta(system), Q, R, Sigma0)
        cost = plant_cost(system, design.K0, Q, R, Sigma0, horizon=400, n_rollouts=64)
        assert cost.value == pytest.approx(design.J, rel=0.02)

    def test_zero_weights(self):
        system, _ = linear_plant()
        cost = plant_cost(
            system, np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 2)), np.eye(3), horizon=20
        )
        assert cost.value == 0.0

    def test_divergence(self, metricsmock):
        system = LinearSystem(A_true=2.0 * np.eye(2), B_true=np.zeros((2, 1)))
        with metricsmock as mm:
            cost = plant_cost(system, np.zeros((1, 2)), np.eye(2), np.eye(1), np.eye(2), horizon=100, n_rollouts=4)
            records = mm.filter_records("incr", stat="lqrinfluence.bench.plant_rollout_diverged")
        assert cost.diverged
        assert cost.n_diverged == 4
        assert cost.value == DIVERGED_COST
        assert records[0].value == 4

    def test_two_link_arm_hanging(self):
        arm = make_system("S4")
        K = np.zeros((2, 4))
        cost = plant_cost(arm, K, np.eye(4), np.eye(2), 0.01 * np.eye(4), horizon=50, n_rollouts=8)
        assert np.isfinite(cost.value)
        assert not cost.diverged


class TestMedianRuntime:
    def test_returns_result(self):
        calls = []

        def fun():
            calls.append(1)
            return len(calls)

        elapsed, result = median_runtime(fun, repeats=3)
        assert result == 3
        assert elapsed >= 0.0


class TestLotoGroundTruth:
    def dataset(self, seed=7):
        rng = np.random.default_rng(seed)
        data, A, B = random_dataset(rng, n_x=2, n_u=1, N=6, T=10, sigma=0.05)
        test, _, _ = random_dataset(rng, n_x=2, n_u=1, N=2, T=10, sigma=0.05, A=A, B=B, first_id=6)
        return data, test

    def test_matches_exact_shifts(self, metricsmock):
        data, test = self.dataset()
        lam = 1e-3
        Q, R, Sigma0 = np.eye(2), 0.1 * np.eye(1), np.eye(2)
        with metricsmock as mm:
            truth = loto_ground_truth(data, test, lam, Q, R, Sigma0)
            assert len(mm.filter_records("incr", stat="lqrinfluence.bench.retrain_fit")) == 6
            assert len(mm.filter_records("timing", stat="lqrinfluence.bench.groundtruth.time")) == 1

        fit = fit_ridge(data, lam)
        J_full = design_lqr(fit.theta_hat, Q, R, Sigma0).J
        assert truth.ids == data.ids
        assert truth.missing == {"nominal_cost": 0}
        assert truth.runtime_s > 0.0
        assert not truth.plant_evaluated
        for record, tau in zip(truth.records, data, strict=True):
            expected = exact_pred_delta(fit, tau, test)
            assert record.delta_pred_loss == pytest.approx(expected, rel=1e-9, abs=1e-12)
            shifted = fit.theta_hat.shifted(exact_loto(fit, tau).exact_shift)
            expected_J = design_lqr(shifted, Q, R, Sigma0).J - J_full
            assert record.delta_nominal_cost == pytest.approx(expected_J, rel=1e-7, abs=1e-10)
            assert record.delta_plant_cost is None

    def test_threads_do_not_change_results(self):
        data, test = self.dataset(seed=8)
        args = (data, test, 1e-3, np.eye(2), 0.1 * np.eye(1), np.eye(2))
        serial = loto_ground_truth(*args)
        threaded = loto_ground_truth(*args, threads=3)
        for a, b in zip(serial.records, threaded.records, strict=True):
            assert a == b

    def test_noiseless_data_barely_moves(self):
        rng = np.random.default_rng(2)
        data, A, B = random_dataset(rng, n_x=2, n_u=1, N=4, T=10, sigma=0.0)
        test, _, _ = random_dataset(rng, n_x=2, n_u=1, N=2, T=10, sigma=0.0, A=A, B=B, first_id=10)
        truth = loto_ground_truth(data, test, 1e-9, np.eye(2), np.eye(1), np.eye(2))
        for record in truth.records:
            assert abs(record.delta_pred_loss) < 1e-12
            assert abs(record.delta_nominal_cost) < 1e-6

    def test_plant_level(self):
        config = ExperimentConfig(family="S2", n_traj=5, traj_len=12, mismatch_strength=0.05)
        experiment = generate_experiment(config)
        Q, R, Sigma0 = config.weights(4, 2)
        truth = loto_ground_truth(
            experiment.train,
            experiment.test,
            config.ridge_lambda,
            Q,
            R,
            Sigma0,
            system=experiment.system,
            plant=True,
            horizon=100,
            n_rollouts=8,
        )
        assert truth.plant_evaluated
        assert truth.plant_cost_full > 0
        assert "plant_cost" in truth.missing
        present = [r for r in truth.records if r.delta_plant_cost is not None]
        assert len(present) == 5 - truth.missing["plant_cost"]

    def test_plant_x0_scale_is_neutral_on_a_linear_plant(self):
        config = ExperimentConfig(family="S1", n_traj=4, traj_len=10)
        experiment = generate_experiment(config)
        Q, R, Sigma0 = config.weights(2, 1)
        args = (experiment.train, experiment.test, config.ridge_lambda, Q, R, Sigma0)
        kwargs = {"system": experiment.system, "plant": True, "horizon": 200, "n_rollouts": 8}
        wide = loto_ground_truth(*args, **kwargs)
        narrow = loto_ground_truth(*args, plant_x0_scale=0.1, **kwargs)
        assert narrow.plant_cost_full == pytest.approx(wide.plant_cost_full, rel=1e-9)
        for a, b in zip(narrow.records, wide.records, strict=True):
            assert a.delta_plant_cost == pytest.approx(b.delta_plant_cost, rel=1e-6, abs=1e-12)

    def test_arm_is_compared_near_hanging(self):
        config = ExperimentConfig(family="S4", n_traj=6, traj_len=20)
        experiment = generate_experiment(config)
        Q, R, Sigma0 = config.weights(4, 2)
        truth = loto_ground_truth(
            experiment.train,
            experiment.test,
            config.ridge_lambda,
            Q,
            R,
            Sigma0,
            system=experiment.system,
            plant=True,
            horizon=200,
            n_rollouts=8,
            plant_x0_scale=config.plant_scale,
        )
        assert truth.missing["plant_cost"] == 0
        assert truth.plant_cost_full > 0

    def test_plant_needs_system(self):
        data, test = self.dataset()
        with pytest.raises(DataError):
            loto_ground_truth(data, test, 1e-3, np.eye(2), np.eye(1), np.eye(2), plant=True)

    def test_needs_two_trajectories(self):
        rng = np.random.default_rng(0)
        data, _, _ = random_dataset(rng, N=1)
        test, _, _ = random_dataset(rng, N=2)
        with pytest.raises(DataError):
            loto_ground_truth(data, test, 1e-3, np.eye(2), np.eye(1), np.eye(2))

    def test_unstabilizable_refit_is_missing(self, metricsmock, monkeypatch):
        data, test = self.dataset()
        calls = []

        def flaky_design(theta, Q, R, Sigma0, options=None):
            calls.append(theta)
            if len(calls) == 3:
                raise AssumptionViolated("no stabilizing gain", rho=1.1)
            return design_lqr(theta, Q, R, Sigma0, options)

        monkeypatch.setattr(groundtruth, "design_lqr", flaky_design)
        with metricsmock as mm:
            truth = loto_ground_truth(data, test, 1e-3, np.eye(2), np.eye(1), np.eye(2))
            records = mm.filter_records("incr", stat="lqrinfluence.bench.groundtruth.missing")
        assert truth.missing == {"nominal_cost": 1}
        assert truth.records[1].delta_nominal_cost is None
        assert truth.records[1].delta_pred_loss is not None
        assert records[0].value == 1
        assert records[0].tags == ["target:nominal_cost"]

    def test_unstabilizable_full_model(self, monkeypatch):
        data, test = self.dataset()

        def broken_design(theta, Q, R, Sigma0, options=None):
            raise AssumptionViolated("no stabilizing gain")

        monkeypatch.setattr(groundtruth, "design_lqr", broken_design)
        truth = loto_ground_truth(data, test, 1e-3, np.eye(2), np.eye(1), np.eye(2))
        assert truth.nominal_cost_full is None
        assert truth.missing == {"nominal_cost": 6}


class TestLotoRunner:
    def build(self, values=None):
        return LotoRunner(build_config_manager(values).with_namespace("loto"))

    def test_auto_plant(self):
        runner = self.build()
        assert not runner.wants_plant(make_system("S1"))
        assert runner.wants_plant(make_system("S2", mismatch_strength=0.02))
        assert runner.wants_plant(make_system("S4"))
        assert not runner.wants_plant(None)

    @pytest.mark.parametrize("mode, expected", [("true", True), ("false", False)])
    def test_forced_plant(self, mode, expected):
        runner = self.build({"LOTO_PLANT_COST": mode})
        assert runner.wants_plant(make_system("S4")) is expected
        assert runner.wants_plant(make_system("S1")) is expected

    @pytest.mark.parametrize(
        "family, values, expected",
        [
            ("S1", None, 1.0),
            ("S4", None, 0.1),
            ("S4", {"LOTO_PLANT_X0_SCALE": "0.5"}, 0.5),
            ("S1", {"LOTO_PLANT_X0_SCALE": "auto"}, 1.0),
        ],
    )
    def test_plant_x0_scale(self, family, values, expected):
        runner = self.build(values)
        assert runner.plant_x0_scale(ExperimentConfig(family=family)) == expected

    def test_plant_x0_scale_must_be_positive(self):
        with pytest.raises(InvalidValueError):
            self.build({"LOTO_PLANT_X0_SCALE": "0"}).plant_x0_scale(ExperimentConfig())

    def test_run(self):
        config = ExperimentConfig(family="S1", n_traj=4, traj_len=10)
        experiment = generate_experiment(config)
        truth = self.build().run(config, experiment.system, experiment.train, experiment.test)
        assert truth.ids == [0, 1, 2, 3]
        assert not truth.plant_evaluated
