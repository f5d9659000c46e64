"""Mask-producing policies.

All policies return group-consistent masks that respect per-layer keep
floors, and either satisfy the requested budget or raise
:class:`InfeasibleConstraintError`. Tie-breaking is deterministic
throughout so runs are bit-reproducible:

* global greedy scans groups in ascending effective score, ties broken by
  lower layer index, then lower filter index (so among tied groups the
  lowest-indexed is pruned first);
* per-layer top-k selection keeps the higher-scored filters, ties broken
  in favour of the lower filter index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .bundle import Dataset, sample_batch
from .cost import ConstraintSpec, cost
from .errors import FormatError, InfeasibleConstraintError
from .metrics import MetricVector, compute_metrics
from .model import NetworkGraph, full_mask


@dataclass(frozen=True)
class FloorPolicy:
    """Per-layer minimum keep count: ceil(fraction * width), at least 1."""

    fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.fraction < 1.0:
            raise FormatError("floor fraction must lie in [0, 1)")

    def resolve(self, graph: NetworkGraph) -> dict[str, int]:
        return {lid: max(1, math.ceil(self.fraction * graph.layer_width(lid)))
                for lid in graph.prunable_ids}


def _group_info(graph: NetworkGraph):
    """Per group: member list, scan tie-break keys, and per-layer membership."""
    groups = graph.filter_groups().groups
    min_filter = np.array([g[0] for g in groups])
    min_layer = np.array([graph.filter_layer[g[0]] for g in groups])
    # how many members each group has in each prunable layer
    layer_members = []
    for g in groups:
        counts = {}
        for j in g:
            li = int(graph.filter_layer[j])
            counts[li] = counts.get(li, 0) + 1
        layer_members.append(counts)
    return groups, min_layer, min_filter, layer_members


def _scan_order(scores, min_layer, min_filter):
    return np.lexsort((min_filter, min_layer, scores))


def naive_prune(graph: NetworkGraph, scores, spec: ConstraintSpec,
                floor: FloorPolicy = FloorPolicy()) -> np.ndarray:
    """Globally prune the cheapest groups until the budget is met.

    Groups are removed in ascending effective-score order; a group that
    would push any of its layers below the keep floor is skipped and the
    scan continues. The resource total is recomputed exactly after every
    removal, and the scan stops at the first state within budget.
    """
    if spec.zeta is None:
        spec = spec.resolve(graph)
    groups, min_layer, min_filter, layer_members = _group_info(graph)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(groups),):
        raise FormatError(
            f"expected one score per group ({len(groups)}), got {scores.shape}")
    z = full_mask(graph)
    total = cost(graph, None, spec.resource).total
    if total <= spec.zeta:
        return z
    floors = floor.resolve(graph)
    alive = {li: graph.layer_width(lid)
             for li, lid in enumerate(graph.prunable_ids)}
    floor_by_index = {li: floors[lid]
                      for li, lid in enumerate(graph.prunable_ids)}
    for gi in _scan_order(scores, min_layer, min_filter):
        members = layer_members[gi]
        if any(alive[li] - n < floor_by_index[li] for li, n in members.items()):
            continue
        z[list(groups[gi])] = False
        for li, n in members.items():
            alive[li] -= n
        total = cost(graph, z, spec.resource).total
        if total <= spec.zeta:
            return z
    raise InfeasibleConstraintError(spec.resource, spec.zeta, total)


def _topk_keep(metric_slice, k):
    """Indices of the k highest-scored filters, ties keeping lower indices."""
    order = np.lexsort((np.arange(len(metric_slice)), -metric_slice))
    return order[:k]


def _select_with_groups(graph, metrics: MetricVector, keep_counts,
                        floors) -> np.ndarray:
    """Per-layer top-k selection reconciled across residual groups.

    Coupled groups are resolved by majority vote over their members'
    per-layer selections (ties keep). If the vote pushes a layer below its
    floor, the highest-scored dropped groups touching that layer are
    resurrected until the floor holds again.
    """
    selected = np.zeros(graph.K, dtype=bool)
    for li, lid in enumerate(graph.prunable_ids):
        sl = graph.filter_slice(lid)
        keep = _topk_keep(metrics.per_filter[sl], keep_counts[li])
        idx = np.arange(sl.start, sl.stop)
        selected[idx[keep]] = True

    groups, min_layer, min_filter, layer_members = _group_info(graph)
    z = np.zeros(graph.K, dtype=bool)
    for g in groups:
        votes = selected[list(g)]
        z[list(g)] = votes.sum() * 2 >= len(g)

    floor_by_index = {li: floors[lid]
                      for li, lid in enumerate(graph.prunable_ids)}
    alive = {li: int(z[graph.filter_slice(lid)].sum())
             for li, lid in enumerate(graph.prunable_ids)}
    if any(alive[li] < floor_by_index[li] for li in alive):
        dropped = [gi for gi, g in enumerate(groups) if not z[g[0]]]
        # richest groups first; ties resurrect the lowest-indexed group
        order = np.lexsort((min_filter[dropped], min_layer[dropped],
                            -metrics.per_group[dropped]))
        for pos in order:
            gi = dropped[pos]
            if not any(alive[li] < floor_by_index[li]
                       for li in layer_members[gi]):
                continue
            z[list(groups[gi])] = True
            for li, n in layer_members[gi].items():
                alive[li] += n
            if all(alive[li] >= floor_by_index[li] for li in alive):
                break
    return z


def uniform_prune(graph: NetworkGraph, metrics: MetricVector,
                  keep_fraction: float,
                  floor: FloorPolicy = FloorPolicy()) -> np.ndarray:
    """Keep the top ceil(keep_fraction * width) filters of every layer."""
    if not 0.0 < keep_fraction <= 1.0:
        raise FormatError("keep_fraction must lie in (0, 1]")
    floors = floor.resolve(graph)
    keep_counts = []
    for lid in graph.prunable_ids:
        k = math.ceil(keep_fraction * graph.layer_width(lid))
        if k < floors[lid]:
            raise FormatError(
                f"keep_fraction {keep_fraction} keeps {k} filters of layer "
                f"'{lid}', below its floor of {floors[lid]}")
        keep_counts.append(k)
    return _select_with_groups(graph, metrics, keep_counts, floors)


def uniform_keep_fraction(graph: NetworkGraph, metrics: MetricVector,
                          spec: ConstraintSpec,
                          floor: FloorPolicy = FloorPolicy()) -> float:
    """Largest keep fraction whose uniform mask fits the budget (bisection).

    Keep fraction and resource fraction differ: cost is roughly quadratic
    in surviving widths, so meeting a 50% MAC budget needs well over 50%
    of filters kept per layer.
    """
    if spec.zeta is None:
        spec = spec.resolve(graph)
    floors = floor.resolve(graph)
    lo = max(floors[lid] / graph.layer_width(lid) for lid in graph.prunable_ids)
    z = uniform_prune(graph, metrics, lo, floor)
    low_cost = cost(graph, z, spec.resource).total
    if low_cost > spec.zeta:
        raise InfeasibleConstraintError(spec.resource, spec.zeta, low_cost)
    hi = 1.0
    if cost(graph, uniform_prune(graph, metrics, hi, floor),
            spec.resource).total <= spec.zeta:
        return hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        zm = uniform_prune(graph, metrics, mid, floor)
        if cost(graph, zm, spec.resource).total <= spec.zeta:
            lo = mid
        else:
            hi = mid
    return lo


def layer_scheduled_prune(graph: NetworkGraph, metrics: MetricVector,
                          schedule,
                          floor: FloorPolicy = FloorPolicy()) -> np.ndarray:
    """Keep an explicit per-layer count of top-scored filters.

    `schedule` lists one keep count per prunable layer, in topological
    order.
    """
    schedule = [int(k) for k in schedule]
    if len(schedule) != graph.L:
        raise FormatError(
            f"schedule has {len(schedule)} entries for {graph.L} prunable layers")
    floors = floor.resolve(graph)
    for lid, k in zip(graph.prunable_ids, schedule):
        if k < floors[lid]:
            raise FormatError(
                f"schedule keeps {k} filters of layer '{lid}', below its "
                f"floor of {floors[lid]}")
        if k > graph.layer_width(lid):
            raise FormatError(
                f"schedule keeps {k} filters of layer '{lid}', which only "
                f"has {graph.layer_width(lid)}")
    return _select_with_groups(graph, metrics, schedule, floors)


def schedule_of_mask(graph: NetworkGraph, z) -> list[int]:
    """Per-layer survivor counts of a mask, usable as a schedule."""
    return [int(np.asarray(z, dtype=bool)[graph.filter_slice(lid)].sum())
            for lid in graph.prunable_ids]


@dataclass
class SingleFilterResult:
    mask: np.ndarray
    prune_order: list[int]       # group indices in removal order
    graph: NetworkGraph          # weights after the interleaved tuning


def single_filter_greedy(graph: NetworkGraph, dataset: Dataset,
                         spec: ConstraintSpec, metric_kind: str = "l2sq",
                         tune_cfg: engine.TuneConfig | None = None,
                         tune_interval: int | None = None,
                         floor: FloorPolicy = FloorPolicy(),
                         metric_batch_size: int = 256,
                         seed: int = 0,
                         return_details: bool = False):
    """Prune one group at a time, re-scoring (and periodically tuning) as it goes.

    Each step recomputes the metric on the current weights, removes the
    single lowest-scored group whose layers stay above their floors, and
    every `tune_interval` removals runs a short masked fine-tune with
    `tune_cfg`. Stops as soon as the budget holds.
    """
    if spec.zeta is None:
        spec = spec.resolve(graph)
    if tune_interval is not None and tune_interval < 1:
        raise FormatError("tune_interval must be >= 1")
    groups, min_layer, min_filter, layer_members = _group_info(graph)
    floors = floor.resolve(graph)
    floor_by_index = {li: floors[lid]
                      for li, lid in enumerate(graph.prunable_ids)}
    alive = {li: graph.layer_width(lid)
             for li, lid in enumerate(graph.prunable_ids)}
    rng = np.random.default_rng(seed)
    batch = sample_batch(dataset, metric_batch_size, rng)

    z = full_mask(graph)
    current = graph
    order: list[int] = []
    total = cost(graph, None, spec.resource).total
    while total > spec.zeta:
        if metric_kind == "taylor1":
            _, grads = engine.backward(current, batch, z)
            m = compute_metrics(current, metric_kind, grads)
        else:
            m = compute_metrics(current, metric_kind)
        candidates = [
            gi for gi in _scan_order(m.per_group, min_layer, min_filter)
            if z[groups[gi][0]]
            and not any(alive[li] - n < floor_by_index[li]
                        for li, n in layer_members[gi].items())
        ]
        if not candidates:
            raise InfeasibleConstraintError(spec.resource, spec.zeta, total)
        gi = candidates[0]
        z[list(groups[gi])] = False
        for li, n in layer_members[gi].items():
            alive[li] -= n
        order.append(int(gi))
        total = cost(graph, z, spec.resource).total
        if (tune_interval is not None and tune_cfg is not None
                and len(order) % tune_interval == 0 and total > spec.zeta):
            current = engine.finetune(current, dataset, tune_cfg, z=z)
    if return_details:
        return SingleFilterResult(mask=z, prune_order=order, graph=current)
    return z
