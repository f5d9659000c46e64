"""Network graph representation, residual filter grouping, and physical pruning.

A network is a DAG of layer descriptors plus a weight map. Graphs are
validated on construction and treated as immutable afterwards: every
operation returns a new graph, and weight arrays are marked read-only so
they can be shared across parallel workers.

Conv kernels are stored as [out_channels, in_channels, kernel_h, kernel_w],
dense kernels as [out_units, in_units]. Filters of prunable layers are
indexed globally: prunable layers are enumerated in topological order and
each contributes a contiguous block of indices, giving every filter a
unique index in [0, K).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GraphValidationError, MaskError

LAYER_KINDS = (
    "input",
    "conv2d",
    "dense",
    "batchnorm",
    "relu",
    "global_avg_pool",
    "add",
    "softmax_ce",
)

# Weight tensor names expected per layer kind.
WEIGHT_NAMES = {
    "conv2d": ("kernel", "bias"),
    "dense": ("kernel", "bias"),
    "batchnorm": ("scale", "shift", "running_mean", "running_var"),
}

_ID_RE = re.compile(r"^[A-Za-z0-9_\-]+$")

DEFAULT_BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerDesc:
    """Descriptor of one layer in the DAG.

    Only the fields relevant to the layer kind are set; the rest stay None.
    """

    id: str
    kind: str
    predecessors: tuple[str, ...] = ()
    prunable: bool = False
    # conv2d / dense geometry
    kernel_h: int | None = None
    kernel_w: int | None = None
    stride: int | None = None
    padding: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    # input geometry
    channels: int | None = None
    height: int | None = None
    width: int | None = None
    # batchnorm
    epsilon: float | None = None


def conv2d(id, pred, in_channels, out_channels, kernel=3, stride=1, padding=1,
           prunable=True):
    """Convenience constructor for a square-kernel conv descriptor."""
    return LayerDesc(
        id=id, kind="conv2d", predecessors=(pred,), prunable=prunable,
        kernel_h=kernel, kernel_w=kernel, stride=stride, padding=padding,
        in_channels=in_channels, out_channels=out_channels,
    )


def dense(id, pred, in_channels, out_channels, prunable=False):
    return LayerDesc(
        id=id, kind="dense", predecessors=(pred,), prunable=prunable,
        in_channels=in_channels, out_channels=out_channels,
    )


def batchnorm(id, pred, epsilon=DEFAULT_BN_EPS):
    return LayerDesc(id=id, kind="batchnorm", predecessors=(pred,), epsilon=epsilon)


def relu(id, pred):
    return LayerDesc(id=id, kind="relu", predecessors=(pred,))


def global_avg_pool(id, pred):
    return LayerDesc(id=id, kind="global_avg_pool", predecessors=(pred,))


def add(id, pred_a, pred_b):
    return LayerDesc(id=id, kind="add", predecessors=(pred_a, pred_b))


def input_layer(id, channels, height, width):
    return LayerDesc(id=id, kind="input", channels=channels, height=height, width=width)


def softmax_ce(id, pred):
    return LayerDesc(id=id, kind="softmax_ce", predecessors=(pred,))


@dataclass(frozen=True)
class FilterGroupPartition:
    """Disjoint groups of global filter indices that must be pruned together.

    Filters coupled through (chains of) residual additions share a group;
    everything else sits in a singleton. Groups are ordered by their
    smallest member and members are sorted ascending, so the partition is
    canonical for a given graph.
    """

    groups: tuple[tuple[int, ...], ...]
    group_of: np.ndarray = field(repr=False)  # filter index -> group index

    def __len__(self):
        return len(self.groups)


class NetworkGraph:
    """Validated DAG of layers plus their weight tensors.

    Weights live as float64 arrays keyed ``weights[layer_id][tensor_name]``
    and are frozen (read-only views) after construction.
    """

    def __init__(self, layers, weights):
        self.layers = tuple(layers)
        self.weights = {
            lid: {name: _freeze(np.asarray(arr, dtype=np.float64)) for name, arr in tensors.items()}
            for lid, tensors in weights.items()
        }
        self.by_id = {}
        for desc in self.layers:
            if desc.id in self.by_id:
                raise GraphValidationError("duplicate layer id", desc.id)
            if not _ID_RE.match(desc.id):
                raise GraphValidationError("layer id must match [A-Za-z0-9_-]+", desc.id)
            self.by_id[desc.id] = desc
        self.topo_order = self._toposort()
        self._shapes = self._infer_shapes()
        self._validate()
        self.prunable_ids = tuple(
            lid for lid in self.topo_order if self.by_id[lid].prunable
        )
        offsets, total = {}, 0
        for lid in self.prunable_ids:
            n = self.by_id[lid].out_channels
            offsets[lid] = (total, n)
            total += n
        self.filter_offsets = offsets
        self.K = total
        self.L = len(self.prunable_ids)
        # filter index -> index of its layer within prunable_ids
        fl = np.empty(self.K, dtype=np.int64)
        for li, lid in enumerate(self.prunable_ids):
            start, n = offsets[lid]
            fl[start:start + n] = li
        self.filter_layer = _freeze(fl)
        self._sources = self._channel_sources()
        logits = self.by_id[self.loss_id].predecessors[0]
        if np.any(self._sources[logits] >= 0):
            raise GraphValidationError(
                "the layer producing the class logits must not be prunable", logits)
        self._groups = None

    # -- structure ---------------------------------------------------------

    def _toposort(self):
        indeg = {d.id: 0 for d in self.layers}
        consumers = {d.id: [] for d in self.layers}
        for desc in self.layers:
            for p in desc.predecessors:
                if p not in self.by_id:
                    raise GraphValidationError(f"unknown predecessor '{p}'", desc.id)
                indeg[desc.id] += 1
                consumers[p].append(desc.id)
        order = []
        ready = [d.id for d in self.layers if indeg[d.id] == 0]
        while ready:
            lid = ready.pop(0)
            order.append(lid)
            for c in consumers[lid]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.layers):
            cyclic = sorted(lid for lid, d in indeg.items() if d > 0)
            raise GraphValidationError("graph contains a cycle", cyclic[0])
        self.consumers = consumers
        return tuple(order)

    def _infer_shapes(self):
        """Feature shape per layer: ('spatial', C, H, W) or ('flat', C)."""
        shapes = {}
        for lid in self.topo_order:
            desc = self.by_id[lid]
            preds = [shapes[p] for p in desc.predecessors]
            if desc.kind == "input":
                if desc.predecessors:
                    raise GraphValidationError("input layer cannot have predecessors", lid)
                for f in ("channels", "height", "width"):
                    if not isinstance(getattr(desc, f), int) or getattr(desc, f) < 1:
                        raise GraphValidationError(f"input layer needs positive '{f}'", lid)
                shapes[lid] = ("spatial", desc.channels, desc.height, desc.width)
            elif desc.kind == "conv2d":
                if len(preds) != 1 or preds[0][0] != "spatial":
                    raise GraphValidationError("conv2d needs one spatial predecessor", lid)
                _, c, h, w = preds[0]
                for f in ("kernel_h", "kernel_w", "stride", "in_channels", "out_channels"):
                    v = getattr(desc, f)
                    if not isinstance(v, int) or v < 1:
                        raise GraphValidationError(f"conv2d needs positive '{f}'", lid)
                if not isinstance(desc.padding, int) or desc.padding < 0:
                    raise GraphValidationError("conv2d needs non-negative 'padding'", lid)
                if desc.in_channels != c:
                    raise GraphValidationError(
                        f"declares in_channels={desc.in_channels} but input has {c}", lid)
                ho = (h + 2 * desc.padding - desc.kernel_h) // desc.stride + 1
                wo = (w + 2 * desc.padding - desc.kernel_w) // desc.stride + 1
                if ho < 1 or wo < 1:
                    raise GraphValidationError("kernel larger than padded input", lid)
                shapes[lid] = ("spatial", desc.out_channels, ho, wo)
            elif desc.kind == "dense":
                if len(preds) != 1 or preds[0][0] != "flat":
                    raise GraphValidationError("dense needs one flat predecessor", lid)
                if desc.in_channels != preds[0][1]:
                    raise GraphValidationError(
                        f"declares in_channels={desc.in_channels} but input has {preds[0][1]}", lid)
                shapes[lid] = ("flat", desc.out_channels)
            elif desc.kind in ("batchnorm", "relu"):
                if len(preds) != 1:
                    raise GraphValidationError(f"{desc.kind} needs exactly one predecessor", lid)
                shapes[lid] = preds[0]
            elif desc.kind == "global_avg_pool":
                if len(preds) != 1 or preds[0][0] != "spatial":
                    raise GraphValidationError("global_avg_pool needs one spatial predecessor", lid)
                shapes[lid] = ("flat", preds[0][1])
            elif desc.kind == "add":
                if len(preds) != 2:
                    raise GraphValidationError("add needs exactly two predecessors", lid)
                if preds[0] != preds[1]:
                    raise GraphValidationError(
                        f"operand shapes differ: {preds[0]} vs {preds[1]}", lid)
                shapes[lid] = preds[0]
            elif desc.kind == "softmax_ce":
                if len(preds) != 1 or preds[0][0] != "flat":
                    raise GraphValidationError("softmax_ce needs one flat predecessor", lid)
                shapes[lid] = preds[0]
            else:
                raise GraphValidationError(f"unknown layer kind '{desc.kind}'", lid)
        return shapes

    def _validate(self):
        inputs = [d for d in self.layers if d.kind == "input"]
        losses = [d for d in self.layers if d.kind == "softmax_ce"]
        if len(inputs) != 1:
            raise GraphValidationError(f"graph must have exactly one input layer, found {len(inputs)}")
        if len(losses) != 1:
            raise GraphValidationError(f"graph must have exactly one loss layer, found {len(losses)}")
        self.input_id = inputs[0].id
        self.loss_id = losses[0].id
        if self.consumers[self.loss_id]:
            raise GraphValidationError("loss layer cannot feed other layers", self.loss_id)
        # every layer must contribute to the loss, otherwise backprop through
        # the graph would leave dangling activations
        live = {self.loss_id}
        for lid in reversed(self.topo_order):
            if lid in live:
                live.update(self.by_id[lid].predecessors)
        for desc in self.layers:
            if desc.id not in live:
                raise GraphValidationError("layer is not an ancestor of the loss node", desc.id)

        for desc in self.layers:
            if desc.prunable and desc.kind not in ("conv2d", "dense"):
                raise GraphValidationError("only conv2d/dense layers can be prunable", desc.id)
            expected = WEIGHT_NAMES.get(desc.kind, ())
            tensors = self.weights.get(desc.id, {})
            if set(tensors) != set(expected):
                raise GraphValidationError(
                    f"expected weight tensors {sorted(expected)}, found {sorted(tensors)}", desc.id)
            for name, arr in tensors.items():
                if not np.all(np.isfinite(arr)):
                    raise GraphValidationError(f"tensor '{name}' contains non-finite entries", desc.id)
            if desc.kind == "conv2d":
                want = (desc.out_channels, desc.in_channels, desc.kernel_h, desc.kernel_w)
                if tensors["kernel"].shape != want:
                    raise GraphValidationError(
                        f"kernel shape {tensors['kernel'].shape} != declared {want}", desc.id)
                if tensors["bias"].shape != (desc.out_channels,):
                    raise GraphValidationError("bias shape mismatch", desc.id)
            elif desc.kind == "dense":
                want = (desc.out_channels, desc.in_channels)
                if tensors["kernel"].shape != want:
                    raise GraphValidationError(
                        f"kernel shape {tensors['kernel'].shape} != declared {want}", desc.id)
                if tensors["bias"].shape != (desc.out_channels,):
                    raise GraphValidationError("bias shape mismatch", desc.id)
            elif desc.kind == "batchnorm":
                c = self.out_channels_of(desc.predecessors[0])
                for name in WEIGHT_NAMES["batchnorm"]:
                    if tensors[name].shape != (c,):
                        raise GraphValidationError(
                            f"tensor '{name}' shape {tensors[name].shape} != ({c},)", desc.id)
        for lid in self.weights:
            if lid not in self.by_id:
                raise GraphValidationError("weights reference unknown layer", lid)

    def _channel_sources(self):
        """Per layer: global filter index owning each output channel, -1 if fixed."""
        src = {}
        for lid in self.topo_order:
            desc = self.by_id[lid]
            if desc.kind == "input":
                src[lid] = _freeze(np.full(desc.channels, -1, dtype=np.int64))
            elif desc.kind in ("conv2d", "dense"):
                if desc.prunable:
                    start, n = self.filter_offsets[lid]
                    src[lid] = _freeze(np.arange(start, start + n, dtype=np.int64))
                else:
                    src[lid] = _freeze(np.full(desc.out_channels, -1, dtype=np.int64))
            elif desc.kind == "add":
                a = src[desc.predecessors[0]]
                b = src[desc.predecessors[1]]
                if np.any((a < 0) != (b < 0)):
                    raise GraphValidationError(
                        "add mixes prunable channels with fixed channels; such "
                        "operands cannot be pruned consistently", lid)
                src[lid] = a
            else:  # batchnorm, relu, global_avg_pool, softmax_ce
                src[lid] = src[desc.predecessors[0]]
        return src

    # -- accessors ---------------------------------------------------------

    def layer(self, lid) -> LayerDesc:
        return self.by_id[lid]

    def feature_shape(self, lid):
        return self._shapes[lid]

    def out_channels_of(self, lid) -> int:
        shape = self._shapes[lid]
        return shape[1]

    def channel_sources(self, lid) -> np.ndarray:
        return self._sources[lid]

    def layer_width(self, lid) -> int:
        """Filter count of a prunable layer."""
        return self.filter_offsets[lid][1]

    def filter_slice(self, lid) -> slice:
        start, n = self.filter_offsets[lid]
        return slice(start, start + n)

    def replace_weights(self, weights) -> "NetworkGraph":
        return NetworkGraph(self.layers, weights)

    def copy_weights(self) -> dict:
        """Writable deep copy of the weight map."""
        return {lid: {name: arr.copy() for name, arr in t.items()}
                for lid, t in self.weights.items()}

    def filter_groups(self) -> FilterGroupPartition:
        if self._groups is None:
            self._groups = build_filter_groups(self)
        return self._groups


def _freeze(arr):
    arr.flags.writeable = False
    return arr


# -- residual filter groups -------------------------------------------------

class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # anchor on the smaller index so the partition is canonical
            if rj < ri:
                ri, rj = rj, ri
            self.parent[rj] = ri


def build_filter_groups(graph: NetworkGraph) -> FilterGroupPartition:
    """Partition the global filter indices into atomic prune groups.

    Channels that meet at an ``add`` node (transitively, through chains of
    adds) must be pruned together to keep operand shapes aligned, so their
    owning filters are unioned position by position.
    """
    uf = _UnionFind(graph.K)
    for lid in graph.topo_order:
        desc = graph.layer(lid)
        if desc.kind != "add":
            continue
        a = graph.channel_sources(desc.predecessors[0])
        b = graph.channel_sources(desc.predecessors[1])
        for i, j in zip(a, b):
            if i >= 0:
                uf.union(int(i), int(j))
    members = {}
    for j in range(graph.K):
        members.setdefault(uf.find(j), []).append(j)
    groups = tuple(tuple(v) for _, v in sorted(members.items()))
    group_of = np.empty(graph.K, dtype=np.int64)
    for gi, g in enumerate(groups):
        for j in g:
            group_of[j] = gi
    return FilterGroupPartition(groups=groups, group_of=_freeze(group_of))


# -- masks -------------------------------------------------------------------

def full_mask(graph: NetworkGraph) -> np.ndarray:
    return np.ones(graph.K, dtype=bool)


def check_mask(graph: NetworkGraph, z, require_survivors=True) -> np.ndarray:
    """Validate a prune mask against the graph; returns it as a bool array."""
    z = np.asarray(z)
    if z.shape != (graph.K,):
        raise MaskError(f"mask length {z.shape} does not match K={graph.K}")
    z = z.astype(bool)
    groups = graph.filter_groups()
    for g in groups.groups:
        vals = z[list(g)]
        if vals.any() != vals.all():
            raise MaskError(f"mask splits residual group containing filter {g[0]}")
    if require_survivors:
        for lid in graph.prunable_ids:
            if not z[graph.filter_slice(lid)].any():
                raise MaskError(f"mask leaves layer '{lid}' with zero filters")
    return z


def channel_mask(graph: NetworkGraph, lid: str, z: np.ndarray) -> np.ndarray | None:
    """Alive mask over a layer's output channels, or None if all fixed/alive."""
    src = graph.channel_sources(lid)
    owned = src >= 0
    if not owned.any():
        return None
    alive = np.ones(src.shape[0], dtype=bool)
    alive[owned] = z[src[owned]]
    if alive.all():
        return None
    return alive


def apply_mask(graph: NetworkGraph, z) -> NetworkGraph:
    """Physically remove pruned filters and the matching consumer channels.

    Kernel rows of pruned filters disappear, every consumer conv/dense loses
    the corresponding input-channel slice, and batchnorm parameter rows of
    pruned channels are dropped. The result is a freshly validated graph.
    """
    z = check_mask(graph, z, require_survivors=True)
    keep_for = {}  # layer id -> bool array over its output channels
    for lid in graph.topo_order:
        m = channel_mask(graph, lid, z)
        keep_for[lid] = m if m is not None else np.ones(graph.out_channels_of(lid), dtype=bool)

    new_layers = []
    new_weights = {}
    for desc in graph.layers:
        lid = desc.id
        tensors = graph.weights.get(lid, {})
        if desc.kind == "conv2d":
            keep_out = keep_for[lid]
            keep_in = keep_for[desc.predecessors[0]]
            kernel = tensors["kernel"][keep_out][:, keep_in]
            bias = tensors["bias"][keep_out]
            new_layers.append(replace(
                desc,
                in_channels=int(keep_in.sum()),
                out_channels=int(keep_out.sum()),
            ))
            new_weights[lid] = {"kernel": kernel, "bias": bias}
        elif desc.kind == "dense":
            keep_out = keep_for[lid]
            keep_in = keep_for[desc.predecessors[0]]
            kernel = tensors["kernel"][keep_out][:, keep_in]
            bias = tensors["bias"][keep_out]
            new_layers.append(replace(
                desc,
                in_channels=int(keep_in.sum()),
                out_channels=int(keep_out.sum()),
            ))
            new_weights[lid] = {"kernel": kernel, "bias": bias}
        elif desc.kind == "batchnorm":
            keep = keep_for[desc.predecessors[0]]
            new_layers.append(desc)
            new_weights[lid] = {name: arr[keep] for name, arr in tensors.items()}
        else:
            new_layers.append(desc)
    return NetworkGraph(new_layers, new_weights)
