"""Per-filter importance scores and per-layer offset application.

Three magnitude heuristics are supported, each computed over a filter's
kernel slice (input channels x kernel height x kernel width, or the input
row of a dense unit):

* ``l1``      - sum of absolute weights
* ``l2sq``    - sum of squared weights (orders filters identically to the
                true Euclidean norm)
* ``taylor1`` - ``|mean(gradient * weight)|``, requiring a gradient set

Filters coupled by residual additions are scored as a group by summing
their members' scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .model import NetworkGraph

METRIC_KINDS = ("l1", "l2sq", "taylor1")

# std of zero-width layers is floored at this scale when used for sampling
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class MetricVector:
    """Scores for every prunable filter of one graph.

    `per_filter[j]` is the score of global filter j, `per_group[g]` the
    summed score of group g (ordered like ``graph.filter_groups()``), and
    `sigma_per_layer[l]` the population standard deviation of the raw
    per-filter scores within prunable layer l (topological order).
    """

    kind: str
    per_filter: np.ndarray
    per_group: np.ndarray
    sigma_per_layer: np.ndarray
    filter_layer: np.ndarray   # global filter index -> prunable layer index
    groups: tuple[tuple[int, ...], ...]

    @property
    def num_layers(self) -> int:
        return len(self.sigma_per_layer)


def _filter_slabs(graph: NetworkGraph, tensors):
    """Yield (layer_id, per-filter 2d view [n_filters, slice]) pairs."""
    for lid in graph.prunable_ids:
        w = tensors[lid]["kernel"]
        yield lid, w.reshape(w.shape[0], -1)


def compute_metrics(graph: NetworkGraph, kind: str,
                    gradients=None) -> MetricVector:
    """Score every prunable filter of the graph.

    `gradients` (as returned by :func:`prunekit.engine.backward`) is
    required for ``taylor1`` and ignored otherwise.
    """
    if kind not in METRIC_KINDS:
        raise FormatError(f"unknown metric kind '{kind}'")
    if kind == "taylor1" and gradients is None:
        raise FormatError("taylor1 scores need a gradient set")
    per_filter = np.empty(graph.K)
    for lid, w2 in _filter_slabs(graph, graph.weights):
        sl = graph.filter_slice(lid)
        if kind == "l1":
            per_filter[sl] = np.abs(w2).sum(axis=1)
        elif kind == "l2sq":
            per_filter[sl] = (w2 * w2).sum(axis=1)
        else:
            g = gradients[lid]["kernel"].reshape(w2.shape)
            per_filter[sl] = np.abs((g * w2).mean(axis=1))
    groups = graph.filter_groups()
    per_group = np.array([per_filter[list(g)].sum() for g in groups.groups])
    sigma = np.array([per_filter[graph.filter_slice(lid)].std()
                      for lid in graph.prunable_ids])
    return MetricVector(
        kind=kind,
        per_filter=per_filter,
        per_group=per_group,
        sigma_per_layer=sigma,
        filter_layer=graph.filter_layer,
        groups=groups.groups,
    )


def compensated_scores(m: MetricVector, beta) -> np.ndarray:
    """Per-group scores after adding each layer's offset to its filters.

    Every filter's effective score is its raw score plus the offset of the
    layer it lives in; group scores are the sums over members, so a zero
    offset vector reproduces ``m.per_group`` exactly.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (m.num_layers,):
        raise FormatError(
            f"offset vector has shape {beta.shape}, expected ({m.num_layers},)")
    effective = m.per_filter + beta[m.filter_layer]
    return np.array([effective[list(g)].sum() for g in m.groups])


def sampling_sigma(m: MetricVector) -> np.ndarray:
    """Per-layer noise scales for offset search, floored for 1-filter layers."""
    return np.maximum(m.sigma_per_layer, SIGMA_FLOOR)
