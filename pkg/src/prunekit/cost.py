"""Exact MAC and parameter accounting for a graph under a prune mask.

Conventions (documented so reported numbers can be audited):

* Only conv2d and dense layers carry MACs. A conv contributes
  ``H_out * W_out * kernel_h * kernel_w * alive_in * alive_out`` and a
  dense layer ``alive_in * alive_out``; bias additions, batchnorm,
  activations, pooling, and residual adds count zero. The classifier
  layer is included.
* Parameter counts cover every element of every weight tensor that
  survives the mask: kernel slices, biases, and all four batchnorm rows
  (scale, shift, running mean, running variance) per surviving channel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError
from .model import NetworkGraph, channel_mask, check_mask

RESOURCES = ("macs", "params")


@dataclass(frozen=True)
class CostReport:
    total: int
    per_layer: dict[str, int]

    def to_json(self) -> dict:
        return {"total": self.total, "per_layer": dict(self.per_layer)}


@dataclass(frozen=True)
class ConstraintSpec:
    """Resource budget: `fraction` of the unpruned cost or an `absolute` count.

    `zeta` is the resolved absolute budget; call :meth:`resolve` against a
    graph before handing the spec to a pruner.
    """

    resource: str = "macs"
    fraction: float | None = None
    absolute: int | None = None
    zeta: int | None = None

    def __post_init__(self):
        if self.resource not in RESOURCES:
            raise FormatError(f"unknown resource '{self.resource}'")
        if self.fraction is None and self.absolute is None and self.zeta is None:
            raise FormatError("constraint needs a fraction or an absolute target")

    def resolve(self, graph: NetworkGraph) -> "ConstraintSpec":
        full = cost(graph, None, self.resource).total
        if self.absolute is not None:
            zeta = int(self.absolute)
        else:
            zeta = int(np.floor(self.fraction * full))
        if not 0 < zeta <= full:
            raise FormatError(
                f"resolved budget {zeta} outside (0, {full}] for resource "
                f"'{self.resource}'")
        return replace(self, zeta=zeta)

    def to_json(self) -> dict:
        return {"resource": self.resource, "fraction": self.fraction,
                "absolute": self.absolute, "zeta": self.zeta}


def _alive_counts(graph: NetworkGraph, z):
    """Surviving output-channel count per layer under the mask."""
    if z is not None:
        z = check_mask(graph, z, require_survivors=False)
    counts = {}
    for lid in graph.topo_order:
        if z is None:
            counts[lid] = graph.out_channels_of(lid)
        else:
            m = channel_mask(graph, lid, z)
            counts[lid] = graph.out_channels_of(lid) if m is None else int(m.sum())
    return counts


def macs(graph: NetworkGraph, z=None) -> CostReport:
    """Multiply-accumulate count of a forward pass under the mask."""
    alive = _alive_counts(graph, z)
    per_layer = {}
    for lid in graph.topo_order:
        desc = graph.layer(lid)
        if desc.kind == "conv2d":
            _, _, ho, wo = graph.feature_shape(lid)
            per_layer[lid] = (ho * wo * desc.kernel_h * desc.kernel_w
                              * alive[desc.predecessors[0]] * alive[lid])
        elif desc.kind == "dense":
            per_layer[lid] = alive[desc.predecessors[0]] * alive[lid]
        else:
            per_layer[lid] = 0
    return CostReport(total=sum(per_layer.values()), per_layer=per_layer)


def params(graph: NetworkGraph, z=None) -> CostReport:
    """Count of surviving weight-tensor elements under the mask."""
    alive = _alive_counts(graph, z)
    per_layer = {}
    for lid in graph.topo_order:
        desc = graph.layer(lid)
        if desc.kind == "conv2d":
            per_layer[lid] = (desc.kernel_h * desc.kernel_w
                              * alive[desc.predecessors[0]] * alive[lid]
                              + alive[lid])
        elif desc.kind == "dense":
            per_layer[lid] = alive[desc.predecessors[0]] * alive[lid] + alive[lid]
        elif desc.kind == "batchnorm":
            per_layer[lid] = 4 * alive[desc.predecessors[0]]
        else:
            per_layer[lid] = 0
    return CostReport(total=sum(per_layer.values()), per_layer=per_layer)


def cost(graph: NetworkGraph, z, resource: str) -> CostReport:
    if resource == "macs":
        return macs(graph, z)
    if resource == "params":
        return params(graph, z)
    raise FormatError(f"unknown resource '{resource}'")


def satisfies(graph: NetworkGraph, z, spec: ConstraintSpec) -> bool:
    """True iff the masked graph's resource total is within the budget."""
    if spec.zeta is None:
        raise FormatError("constraint spec must be resolved first")
    return cost(graph, z, spec.resource).total <= spec.zeta
