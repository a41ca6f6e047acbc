# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""
End-to-end influence scores: fit, factor, design, adjoint, score.

The Hessian is factored once and the adjoint Lyapunov equation is solved once
per report. Both influence directions ``H^{-1} grad L_pred`` and
``H^{-1} grad J`` are computed once and every trajectory score is a dot
product against them.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import time

from everett.manager import Option, parse_class

from lqrinfluence.bench.metrics import metrics
from lqrinfluence.daresens import design_lqr, grad_J_adjoint, grad_J_forward
from lqrinfluence.errors import AssumptionViolated, DegenerateInput, IdMismatch, stage
from lqrinfluence.ident import (
    exact_pred_delta,
    fit_ridge,
    influence_dot,
    loto_shift,
    pred_loss_grad,
    traj_gradient,
    traj_loss,
)
from lqrinfluence.libmarkus import METRICS
from lqrinfluence.lyapriccati import DEFAULT_OPTIONS, SolverOptions, spectral_radius


LOGGER = logging.getLogger(__name__)

REPORT_VERSION = 1

GRADIENT_METHODS = ("adjoint", "forward")

PRED_LOSS = "pred_loss"
NOMINAL_COST = "nominal_cost"
PLANT_COST = "plant_cost"


@dataclass(frozen=True)
class InfluenceRecord:
    """Scores for one training trajectory.

    ``if2`` and ``grad_only_J`` are None when the identified model violates
    the closed-loop stability assumption.

    """

    traj_id: int
    if1: float
    if1_second_order: float
    exact_loto_pred_delta: float
    grad_only_pred: float
    residual_norm: float
    delta_k: float
    if2: float = None
    grad_only_J: float = None


@dataclass(frozen=True)
class ModelSummary:
    n_x: int
    n_u: int
    p: int
    N: int
    n_test: int
    ridge_lambda: float
    rho_open: float
    rho_cl: float = None
    J: float = None
    inverse_hvp: str = "cholesky"
    gradient_method: str = "adjoint"
    structured: bool = True


@dataclass(frozen=True)
class Diagnostics:
    assumption_violated: bool = False
    message: str = ""
    rho_cl: float = None
    max_delta_k: float = None
    n_delta_k_out_of_range: int = 0


@dataclass(frozen=True, eq=False)
class InfluenceReport:
    records: tuple
    summary: ModelSummary
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    # wall-clock seconds per method; kept out of the report file
    timings: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    @property
    def ids(self):
        return [record.traj_id for record in self.records]

    def column(self, name):
        return {record.traj_id: getattr(record, name) for record in self.records}


@dataclass(frozen=True)
class EvalRow:
    system: str
    target: str
    method: str
    metrics: object


def _map(fun, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(fun, items))
    return [fun(item) for item in items]


def influence_report(
    dataset,
    test,
    ridge_lambda,
    Q,
    R,
    Sigma0,
    solver_options=None,
    inverse_hvp=None,
    gradient_method="adjoint",
    structured=True,
    threads=1,
):
    """Compute every influence score for ``dataset``.

    :arg dataset: training :py:class:`lqrinfluence.ident.Dataset`
    :arg test: held-out :py:class:`lqrinfluence.ident.Dataset`
    :arg ridge_lambda: ridge regularization
    :arg Q: state weight
    :arg R: input weight
    :arg Sigma0: initial-state covariance
    :arg solver_options: :py:class:`lqrinfluence.lyapriccati.SolverOptions`
    :arg inverse_hvp: an :py:class:`lqrinfluence.ext.inverse_hvp_base.InverseHvpBase`
        backend; None uses the Cholesky factor of the fit
    :arg gradient_method: ``adjoint`` or ``forward``
    :arg structured: use the block-diagonal Hessian
    :arg threads: worker threads for the per-trajectory loops

    :returns: :py:class:`InfluenceReport`; when the identified model can't be
        stabilized the IF2 fields are None and ``diagnostics`` says why

    """
    if gradient_method not in GRADIENT_METHODS:
        raise ValueError(f"unknown gradient method {gradient_method!r}")
    options = solver_options or DEFAULT_OPTIONS
    with stage("validate"):
        dataset.require_loto()

    timings = {}
    clock = time.perf_counter
    start = clock()
    with METRICS.timer("pipeline.influence.time"):
        with stage("fit"):
            fit = fit_ridge(dataset, ridge_lambda, structured=structured)
        timings["fit"] = clock() - start

        solve = inverse_hvp.bind(fit) if inverse_hvp is not None else fit.solve
        backend_name = inverse_hvp.name if inverse_hvp is not None else "cholesky"

        mark = clock()
        with stage("prediction gradient"):
            grad_L = pred_loss_grad(fit.theta_hat, test)
            v_pred = solve(grad_L)
        t_pred = clock() - mark

        mark = clock()
        design = grad_J = v_cost = None
        diagnostics = {}
        try:
            with stage("design"):
                design = design_lqr(fit.theta_hat, Q, R, Sigma0, options)
        except AssumptionViolated as exc:
            METRICS.incr("pipeline.assumption_violated")
            LOGGER.warning("skipping IF2: %s", exc)
            diagnostics = {"assumption_violated": True, "message": str(exc), "rho_cl": exc.rho}
        if design is not None:
            with stage("cost gradient"):
                if gradient_method == "adjoint":
                    grad_J = grad_J_adjoint(design)
                else:
                    grad_J = grad_J_forward(design, threads=threads)
                v_cost = solve(grad_J.grad)
        t_cost = clock() - mark

        def _scores(tau):
            g = traj_gradient(fit, tau)
            scores = {
                "traj_id": tau.id,
                "if1": influence_dot(g, v_pred),
                "grad_only_pred": influence_dot(g, grad_L),
                "residual_norm": traj_loss(fit.theta_hat, tau),
            }
            if grad_J is not None:
                scores["if2"] = influence_dot(g, v_cost)
                scores["grad_only_J"] = influence_dot(g, grad_J.grad)
            return scores

        mark = clock()
        with stage("scores"):
            scores = _map(_scores, dataset.trajectories, threads)
        t_scores = clock() - mark

        def _exact(tau):
            shift = loto_shift(fit, tau)
            return {
                "exact_loto_pred_delta": exact_pred_delta(fit, tau, test, shift),
                "if1_second_order": float(grad_L @ shift.second_order_shift),
                "delta_k": shift.delta_k,
            }

        mark = clock()
        with stage("exact loto"):
            exact = _map(_exact, dataset.trajectories, threads)
        t_exact = clock() - mark

    records = tuple(InfluenceRecord(**s, **e) for s, e in zip(scores, exact, strict=True))

    delta_ks = [record.delta_k for record in records]
    out_of_range = sum(delta_k >= 1.0 for delta_k in delta_ks)
    if out_of_range:
        METRICS.incr("pipeline.delta_k_out_of_range", value=out_of_range)
        LOGGER.warning("%d trajectories have curvature share >= 1", out_of_range)

    timings.update(
        {
            "residual": timings["fit"] + t_scores,
            "grad_only": timings["fit"] + t_scores,
            "if1": timings["fit"] + t_pred + t_scores,
            "if1_second_order": timings["fit"] + t_pred + t_exact,
            "exact_loto": timings["fit"] + t_pred + t_exact,
            "total": clock() - start,
        }
    )
    if design is not None:
        timings["if2"] = timings["fit"] + t_cost + t_scores

    summary = ModelSummary(
        n_x=dataset.n_x,
        n_u=dataset.n_u,
        p=dataset.p,
        N=dataset.N,
        n_test=test.N,
        ridge_lambda=float(ridge_lambda),
        rho_open=spectral_radius(fit.theta_hat.matrices()[0]),
        rho_cl=design.dare.rho_cl if design is not None else None,
        J=design.J if design is not None else None,
        inverse_hvp=backend_name,
        gradient_method=gradient_method,
        structured=structured,
    )
    LOGGER.info(
        "influence N=%d p=%d rho_cl=%s J=%s in %.3fs",
        dataset.N,
        dataset.p,
        summary.rho_cl,
        summary.J,
        timings["total"],
    )
    return InfluenceReport(
        records=records,
        summary=summary,
        diagnostics=Diagnostics(
            max_delta_k=float(max(delta_ks)),
            n_delta_k_out_of_range=out_of_range,
            **diagnostics,
        ),
        timings=timings,
    )


#: method -> report column, per target
METHODS = {
    PRED_LOSS: (
        ("residual", "residual_norm"),
        ("grad_only", "grad_only_pred"),
        ("if1", "if1"),
        ("if1_second_order", "if1_second_order"),
        ("exact_loto", "exact_loto_pred_delta"),
    ),
    NOMINAL_COST: (
        ("residual", "residual_norm"),
        ("grad_only", "grad_only_J"),
        ("if2", "if2"),
    ),
    PLANT_COST: (
        ("residual", "residual_norm"),
        ("grad_only", "grad_only_J"),
        ("if2", "if2"),
    ),
}


def evaluate(report, truth, system="", k=5):
    """Score every method against the ground truth, target by target.

    Rows whose columns have fewer than two usable pairs are skipped.

    :arg report: :py:class:`InfluenceReport`
    :arg truth: :py:class:`lqrinfluence.bench.groundtruth.GroundTruth`
    :arg system: label for the ``system`` column

    :returns: list of :py:class:`EvalRow`

    :raises IdMismatch: when the report and the ground truth cover different
        trajectories

    """
    report_ids = set(report.ids)
    truth_ids = set(truth.ids)
    if report_ids != truth_ids:
        raise IdMismatch(
            f"report has {len(report_ids)} trajectories, ground truth {len(truth_ids)}, "
            + f"{len(report_ids & truth_ids)} in common"
        )

    ids = truth.ids
    retraining_s = truth.runtime_s
    targets = [PRED_LOSS, NOMINAL_COST]
    if truth.plant_evaluated:
        targets.append(PLANT_COST)

    rows = []
    for target in targets:
        true_column = truth.column(target)
        true_values = [true_column[traj_id] for traj_id in ids]
        for method, column_name in (*METHODS[target], ("retraining", None)):
            if column_name is None:
                predicted = true_values
                time_s = retraining_s
            else:
                column = report.column(column_name)
                predicted = [column[traj_id] for traj_id in ids]
                time_s = report.timings.get(method)
            try:
                result = metrics(predicted, true_values, k=k)
            except DegenerateInput as exc:
                LOGGER.info("skipping %s/%s: %s", target, method, exc)
                continue
            rows.append(
                EvalRow(
                    system=system,
                    target=target,
                    method=method,
                    metrics=result.with_timing(time_s, retraining_s),
                )
            )
    return rows


def parse_gradient_method(value):
    value = value.strip().lower()
    if value not in GRADIENT_METHODS:
        raise ValueError(f"{value!r} is not one of {', '.join(GRADIENT_METHODS)}")
    return value


def parse_positive_float(value):
    parsed = float(value)
    if not parsed > 0:
        raise ValueError(f"{value!r} is not positive")
    return parsed


class InfluenceEngine:
    """Computes influence reports.

    The inverse Hessian-vector products go through a pluggable backend. The
    default is the direct Cholesky solve; to use conjugate gradient::

        influence_inverse_hvp_class: lqrinfluence.ext.cg.inverse_hvp.CgInverseHvp

    """

    class Config:
        ridge_lambda = Option(
            default="1e-5", parser=parse_positive_float, doc="Ridge regularization lambda."
        )
        q_scale = Option(default="1.0", parser=float, doc="Q = q_scale * I.")
        r_scale = Option(default="0.1", parser=float, doc="R = r_scale * I.")
        sigma0_scale = Option(default="1.0", parser=float, doc="Sigma0 = sigma0_scale * I.")
        inverse_hvp_class = Option(
            default="lqrinfluence.ext.inverse_hvp_base.CholeskyInverseHvp",
            parser=parse_class,
            doc="The class that computes inverse Hessian-vector products.",
        )
        gradient_method = Option(
            default="adjoint",
            parser=parse_gradient_method,
            doc="How to compute the cost gradient: adjoint (one solve) or forward (p solves).",
        )
        structured = Option(
            default="true",
            parser=bool,
            doc="Use the block-diagonal Hessian; false factors the dense p x p Hessian.",
        )
        dare_tol_abs = Option(default="1e-12", parser=float, doc="Absolute DARE residual tolerance.")
        dare_tol_rel = Option(default="1e-10", parser=float, doc="Relative DARE residual tolerance.")
        dare_max_iter = Option(default="100", parser=int, doc="Maximum Newton-Kleinman steps.")
        stability_margin = Option(
            default="1e-8",
            parser=float,
            doc="Spectral radii at or above 1 - margin count as unstable.",
        )

    def __init__(self, config):
        self.config = config.with_options(self)
        self.inverse_hvp = self.config("inverse_hvp_class")(config.with_namespace("inverse_hvp"))

    def get_components(self):
        """Return map of namespace -> component for traversing component tree."""
        return {"inverse_hvp": self.inverse_hvp}

    def design_settings(self):
        """Return the :py:class:`lqrinfluence.bench.experiment.ExperimentConfig` fields set here."""
        return {
            "ridge_lambda": self.config("ridge_lambda"),
            "q_scale": self.config("q_scale"),
            "r_scale": self.config("r_scale"),
            "sigma0_scale": self.config("sigma0_scale"),
        }

    def solver_options(self):
        return SolverOptions(
            tol_abs=self.config("dare_tol_abs"),
            tol_rel=self.config("dare_tol_rel"),
            max_iter=self.config("dare_max_iter"),
            stability_margin=self.config("stability_margin"),
        )

    @property
    def structured(self):
        return self.config("structured")

    def run(self, experiment_config, dataset, test, threads=1):
        """Run :py:func:`influence_report` with this engine's settings."""
        Q, R, Sigma0 = experiment_config.weights(dataset.n_x, dataset.n_u)
        return influence_report(
            dataset,
            test,
            experiment_config.ridge_lambda,
            Q,
            R,
            Sigma0,
            solver_options=self.solver_options(),
            inverse_hvp=self.inverse_hvp,
            gradient_method=self.config("gradient_method"),
            structured=self.structured,
            threads=threads,
        )
