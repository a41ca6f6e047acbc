# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

from dataclasses import dataclass
import logging

import numpy as np
import scipy.stats

from lqrinfluence.errors import DegenerateInput


LOGGER = logging.getLogger(__name__)

TOP_K = 5


@dataclass(frozen=True)
class EvalMetrics:
    """Agreement between predicted and true deletion effects.

    Correlations are None when either side is constant.

    """

    pearson: float
    spearman: float
    mae: float
    topk: float
    n: int
    n_missing: int = 0
    time_s: float = None
    speedup: float = None

    def with_timing(self, time_s, reference_s=None):
        speedup = None
        if time_s is not None and reference_s is not None and time_s > 0:
            speedup = reference_s / time_s
        return EvalMetrics(
            pearson=self.pearson,
            spearman=self.spearman,
            mae=self.mae,
            topk=self.topk,
            n=self.n,
            n_missing=self.n_missing,
            time_s=time_s,
            speedup=speedup,
        )


def _is_missing(value):
    return value is None or not np.isfinite(value)


def top_k_indices(values, k):
    """Indices of the ``k`` largest values; ties keep the earlier index."""
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return set(order[:k].tolist())


def topk_overlap(predicted, truth, k=TOP_K):
    k = min(k, len(truth))
    if k == 0:
        return 0.0
    return len(top_k_indices(predicted, k) & top_k_indices(truth, k)) / k


def metrics(predicted, truth, k=TOP_K):
    """Compare predicted scores with true deltas.

    Pairs where either side is None or non-finite are dropped first.

    :arg predicted: sequence of scores
    :arg truth: sequence of true deltas, aligned with ``predicted``
    :arg k: top-k set size

    :returns: :py:class:`EvalMetrics`

    :raises DegenerateInput: with fewer than two usable pairs

    """
    if len(predicted) != len(truth):
        raise DegenerateInput(f"{len(predicted)} scores for {len(truth)} deltas")

    pairs = [
        (float(p), float(t))
        for p, t in zip(predicted, truth, strict=True)
        if not (_is_missing(p) or _is_missing(t))
    ]
    n_missing = len(truth) - len(pairs)
    if len(pairs) < 2:
        raise DegenerateInput(f"need at least 2 non-missing pairs, got {len(pairs)}")

    x = np.array([p for p, _ in pairs])
    y = np.array([t for _, t in pairs])

    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        LOGGER.debug("constant input, correlations undefined")
        pearson = spearman = None
    else:
        pearson = float(scipy.stats.pearsonr(x, y).statistic)
        spearman = float(scipy.stats.spearmanr(x, y).statistic)

    return EvalMetrics(
        pearson=pearson,
        spearman=spearman,
        mae=float(np.mean(np.abs(x - y))),
        topk=topk_overlap(x, y, k),
        n=len(pairs),
        n_missing=n_missing,
    )
