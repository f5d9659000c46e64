"""Forward/backward passes, masked loss evaluation, and SGD fine-tuning.

All arithmetic is float64. Activations use channels-last layout internally
([N, H, W, C]) so the convolution inner loops reduce to matrix products;
batches and kernels are converted at the boundary.

Masking semantics: a pruned filter's output channel is zeroed after every
op it flows through (post-batchnorm, post-activation), which makes the
masked forward pass agree with physically pruned graphs to rounding error.

Batchnorm uses running statistics for loss evaluation (`forward_loss`,
`backward`) and batch statistics during `finetune`, where running stats
are updated with momentum 0.1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bundle import Batch, Dataset
from .errors import DivergenceError, FormatError
from .model import NetworkGraph, channel_mask, check_mask

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1

# tensors that receive gradients / SGD updates; running stats are buffers
TRAINABLE = {"kernel", "bias", "scale", "shift"}


@dataclass(frozen=True)
class TuneConfig:
    """SGD schedule for fine-tuning.

    The learning rate starts at `learning_rate` and is multiplied by
    `lr_drop_factor` at the start of each epoch listed in `lr_drop_epochs`.
    `weight_decay` adds the usual L2 pull on kernels, biases, and
    batchnorm scale/shift (0 disables it).
    """

    epochs: int = 20
    learning_rate: float = 0.01
    lr_drop_factor: float = 0.1
    lr_drop_epochs: tuple[int, ...] = (12, 16)
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning rate and batch size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.learning_rate * self.lr_drop_factor ** drops


def _pad_nhwc(x, p):
    if p == 0:
        return x
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w, :] = x
    return xp


def _im2col(x, desc):
    """Patch matrix [B*Ho*Wo, kh*kw*Ci] for one conv; returns (matrix, padded hw)."""
    kh, kw = desc.kernel_h, desc.kernel_w
    s, p = desc.stride, desc.padding
    b, h, w, ci = x.shape
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    xp = _pad_nhwc(x, p)
    sb, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (b, ho, wo, kh, kw, ci), (sb, s * sh, s * sw, sh, sw, sc))
    return windows.reshape(b * ho * wo, kh * kw * ci), xp.shape[1:3]


def _kernel_matrix(kernel):
    """Kernel [out, in, kh, kw] as a [kh*kw*in, out] matmul operand."""
    co = kernel.shape[0]
    return np.ascontiguousarray(kernel.transpose(2, 3, 1, 0).reshape(-1, co))


def _output_masks(graph: NetworkGraph, z) -> dict:
    """Per-layer channel masks implied by a prune mask (validated)."""
    if z is None:
        return {}
    z = check_mask(graph, z, require_survivors=False)
    masks = {}
    for lid in graph.topo_order:
        m = channel_mask(graph, lid, z)
        if m is not None:
            masks[lid] = m
    return masks


def _check_batch(graph: NetworkGraph, batch: Batch):
    desc = graph.layer(graph.input_id)
    want = (desc.channels, desc.height, desc.width)
    if batch.inputs.shape[1:] != want:
        raise FormatError(
            f"batch inputs {batch.inputs.shape[1:]} do not match the input "
            f"layer {want}")


class _Pass:
    """One forward (and optionally backward) pass over a graph."""

    def __init__(self, graph, weights, masks, train, keep_windows=False):
        self.graph = graph
        self.weights = weights
        self.masks = masks
        self.train = train
        self.keep_windows = keep_windows
        self.acts = {}       # layer id -> output activation
        self.windows = {}    # layer id -> (im2col matrix, padded hw), if kept
        self.bn_cache = {}   # layer id -> (mean, inv_std) used this pass
        self.bn_updates = {} # layer id -> (new_running_mean, new_running_var)
        self.probs = None
        self.loss = None

    def forward(self, batch: Batch) -> float:
        g = self.graph
        x = np.ascontiguousarray(batch.inputs.transpose(0, 2, 3, 1), dtype=np.float64)
        for lid in g.topo_order:
            desc = g.layer(lid)
            if desc.kind == "input":
                out = x
            elif desc.kind == "conv2d":
                out = self._conv_forward(desc, self.acts[desc.predecessors[0]])
            elif desc.kind == "dense":
                w = self.weights[lid]
                out = self.acts[desc.predecessors[0]] @ w["kernel"].T + w["bias"]
            elif desc.kind == "batchnorm":
                out = self._bn_forward(desc, self.acts[desc.predecessors[0]])
            elif desc.kind == "relu":
                out = np.maximum(self.acts[desc.predecessors[0]], 0.0)
            elif desc.kind == "global_avg_pool":
                out = self.acts[desc.predecessors[0]].mean(axis=(1, 2))
            elif desc.kind == "add":
                a, b = desc.predecessors
                out = self.acts[a] + self.acts[b]
            elif desc.kind == "softmax_ce":
                out = self.acts[desc.predecessors[0]]
            m = self.masks.get(lid)
            if m is not None:
                out = out * m
            if not np.all(np.isfinite(out)):
                raise DivergenceError("non-finite activation", lid)
            self.acts[lid] = out
        logits = self.acts[g.loss_id]
        labels = batch.labels
        if labels.max() >= logits.shape[1]:
            raise FormatError(
                f"label {int(labels.max())} out of range for {logits.shape[1]} classes")
        shifted = logits - logits.max(axis=1, keepdims=True)
        exps = np.exp(shifted)
        norm = exps.sum(axis=1, keepdims=True)
        self.probs = exps / norm
        lse = np.log(norm[:, 0]) + logits.max(axis=1)
        self.loss = float(np.mean(lse - logits[np.arange(len(labels)), labels]))
        self.labels = labels
        return self.loss

    def backward(self):
        g = self.graph
        n = len(self.labels)
        dlogits = self.probs.copy()
        dlogits[np.arange(n), self.labels] -= 1.0
        dlogits /= n
        grads_out = {g.loss_id: dlogits}
        param_grads = {}
        for lid in reversed(g.topo_order):
            desc = g.layer(lid)
            dy = grads_out.pop(lid, None)
            if dy is None or desc.kind == "input":
                continue
            m = self.masks.get(lid)
            if m is not None:
                dy = dy * m

            if desc.kind == "softmax_ce":
                self._accum(grads_out, desc.predecessors[0], dy)
            elif desc.kind == "conv2d":
                dx, dk, db = self._conv_backward(desc, self.acts[desc.predecessors[0]], dy)
                param_grads[lid] = {"kernel": dk, "bias": db}
                self._accum(grads_out, desc.predecessors[0], dx)
            elif desc.kind == "dense":
                w = self.weights[lid]
                x = self.acts[desc.predecessors[0]]
                param_grads[lid] = {"kernel": dy.T @ x, "bias": dy.sum(axis=0)}
                self._accum(grads_out, desc.predecessors[0], dy @ w["kernel"])
            elif desc.kind == "batchnorm":
                dx, dscale, dshift = self._bn_backward(desc, self.acts[desc.predecessors[0]], dy)
                param_grads[lid] = {"scale": dscale, "shift": dshift}
                self._accum(grads_out, desc.predecessors[0], dx)
            elif desc.kind == "relu":
                x = self.acts[desc.predecessors[0]]
                self._accum(grads_out, desc.predecessors[0], dy * (x > 0))
            elif desc.kind == "global_avg_pool":
                x = self.acts[desc.predecessors[0]]
                h, w_ = x.shape[1], x.shape[2]
                dx = np.broadcast_to(dy[:, None, None, :] / (h * w_), x.shape)
                self._accum(grads_out, desc.predecessors[0], dx)
            elif desc.kind == "add":
                a, b = desc.predecessors
                self._accum(grads_out, a, dy)
                self._accum(grads_out, b, dy)
        return param_grads

    @staticmethod
    def _accum(grads_out, lid, g):
        if lid in grads_out:
            grads_out[lid] = grads_out[lid] + g
        else:
            grads_out[lid] = g

    # -- ops ----------------------------------------------------------------

    def _conv_forward(self, desc, x):
        w = self.weights[desc.id]
        windows, xp_shape = _im2col(x, desc)
        if self.keep_windows:
            self.windows[desc.id] = (windows, xp_shape)
        w2 = _kernel_matrix(w["kernel"])
        out = windows @ w2 + w["bias"]
        b = x.shape[0]
        kh = desc.kernel_h
        ho = (x.shape[1] + 2 * desc.padding - kh) // desc.stride + 1
        wo = (x.shape[2] + 2 * desc.padding - desc.kernel_w) // desc.stride + 1
        return out.reshape(b, ho, wo, desc.out_channels)

    def _conv_backward(self, desc, x, dy):
        w = self.weights[desc.id]
        kh, kw = desc.kernel_h, desc.kernel_w
        ci, co = desc.in_channels, desc.out_channels
        s, p = desc.stride, desc.padding
        b, h, wdt, _ = x.shape
        ho, wo = dy.shape[1], dy.shape[2]
        if desc.id in self.windows:
            windows, xp_shape = self.windows[desc.id]
        else:
            windows, xp_shape = _im2col(x, desc)
        w2 = _kernel_matrix(w["kernel"])
        d2 = dy.reshape(-1, co)
        dw2 = windows.T @ d2                    # [kh*kw*ci, co]
        dwin = (d2 @ w2.T).reshape(b, ho, wo, kh, kw, ci)
        dxp = np.zeros((b,) + xp_shape + (ci,))
        for u in range(kh):
            for v in range(kw):
                dxp[:, u:u + s * ho:s, v:v + s * wo:s, :] += dwin[:, :, :, u, v, :]
        dx = dxp[:, p:p + h, p:p + wdt, :] if p else dxp
        dk = dw2.reshape(kh, kw, ci, co).transpose(3, 2, 0, 1)
        return dx, np.ascontiguousarray(dk), d2.sum(axis=0)

    def _bn_forward(self, desc, x):
        w = self.weights[desc.id]
        eps = desc.epsilon
        axes = tuple(range(x.ndim - 1))
        if self.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.bn_updates[desc.id] = (
                (1.0 - BN_MOMENTUM) * w["running_mean"] + BN_MOMENTUM * mean,
                (1.0 - BN_MOMENTUM) * w["running_var"] + BN_MOMENTUM * var,
            )
        else:
            mean, var = w["running_mean"], w["running_var"]
        inv = 1.0 / np.sqrt(var + eps)
        self.bn_cache[desc.id] = (mean, inv)
        a = w["scale"] * inv
        return x * a + (w["shift"] - mean * a)

    def _bn_backward(self, desc, x, dy):
        w = self.weights[desc.id]
        mean, inv = self.bn_cache[desc.id]
        axes = tuple(range(x.ndim - 1))
        xhat = (x - mean) * inv
        dscale = (dy * xhat).sum(axis=axes)
        dshift = dy.sum(axis=axes)
        if not self.train:
            return dy * (w["scale"] * inv), dscale, dshift
        m = np.prod([x.shape[a] for a in axes])
        dxhat = dy * w["scale"]
        dvar = (dxhat * (x - mean)).sum(axis=axes) * (-0.5) * inv ** 3
        dmean = -(dxhat.sum(axis=axes)) * inv + dvar * (-2.0 / m) * (x - mean).sum(axis=axes)
        dx = dxhat * inv + dvar * (2.0 / m) * (x - mean) + dmean / m
        return dx, dscale, dshift


def _run(graph, batch, z, weights=None, train=False, want_grads=False):
    _check_batch(graph, batch)
    p = _Pass(graph, weights or graph.weights, _output_masks(graph, z), train,
              keep_windows=want_grads)
    loss = p.forward(batch)
    if not want_grads:
        return loss, None, p
    return loss, p.backward(), p


def forward_loss(graph: NetworkGraph, batch: Batch, z=None) -> float:
    """Mean cross-entropy of the batch, optionally under a prune mask."""
    return _run(graph, batch, z)[0]


def backward(graph: NetworkGraph, batch: Batch, z=None, train_mode=False):
    """Loss plus exact gradients for every trainable weight tensor.

    Returns ``(loss, grads)`` with ``grads[layer_id][tensor_name]`` matching
    the weight tensor's shape. Batchnorm running statistics are buffers,
    not parameters, and carry no gradient.
    """
    loss, grads, _ = _run(graph, batch, z, train=train_mode, want_grads=True)
    return loss, grads


def loss_delta(graph: NetworkGraph, batch: Batch, z) -> float:
    """|loss without mask - loss under mask| on one batch."""
    return abs(forward_loss(graph, batch) - forward_loss(graph, batch, z))


def single_filter_deltas(graph: NetworkGraph, batch: Batch) -> np.ndarray:
    """Measured loss delta of masking each filter group on its own.

    Output is ordered like ``graph.filter_groups()`` (one entry per group:
    coupled filters are masked together, so there is no finer-grained
    measurement to make).
    """
    base = forward_loss(graph, batch)
    groups = graph.filter_groups()
    out = np.empty(len(groups))
    for gi, g in enumerate(groups.groups):
        z = np.ones(graph.K, dtype=bool)
        z[list(g)] = False
        out[gi] = abs(base - forward_loss(graph, batch, z))
    return out


def evaluate(graph: NetworkGraph, dataset: Dataset, z=None, batch_size=512):
    """(mean loss, accuracy) over a dataset, streamed in fixed-order chunks."""
    masks = _output_masks(graph, z)
    total_loss, correct = 0.0, 0
    for start in range(0, dataset.n, batch_size):
        batch = dataset.batch(slice(start, start + batch_size))
        _check_batch(graph, batch)
        p = _Pass(graph, graph.weights, masks, train=False)
        loss = p.forward(batch)
        total_loss += loss * batch.n
        preds = p.acts[graph.loss_id].argmax(axis=1)
        correct += int((preds == batch.labels).sum())
    return total_loss / dataset.n, correct / dataset.n


def finetune(graph: NetworkGraph, dataset: Dataset, cfg: TuneConfig,
             z=None) -> NetworkGraph:
    """SGD with (nesterov) momentum over the dataset; returns a new graph.

    Training shuffles with a generator seeded from ``cfg.seed``, so a fixed
    seed reproduces bit-identical weights. With ``epochs == 0`` the weights
    are returned unchanged.
    """
    weights = graph.copy_weights()
    if cfg.epochs == 0:
        return graph.replace_weights(weights)
    masks = _output_masks(graph, z)
    rng = np.random.default_rng(cfg.seed)
    velocity = {
        lid: {name: np.zeros_like(arr) for name, arr in t.items() if name in TRAINABLE}
        for lid, t in weights.items()
    }
    first_epoch_loss = last_epoch_loss = None
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(dataset.n)
        losses = []
        for start in range(0, dataset.n, cfg.batch_size):
            batch = dataset.batch(perm[start:start + cfg.batch_size])
            p = _Pass(graph, weights, masks, train=True)
            try:
                loss = p.forward(batch)
                grads = p.backward()
            except DivergenceError as e:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: {e}") from e
            losses.append(loss)
            for lid, new_stats in p.bn_updates.items():
                weights[lid]["running_mean"], weights[lid]["running_var"] = new_stats
            for lid, tensors in grads.items():
                for name, g in tensors.items():
                    if cfg.weight_decay:
                        g = g + cfg.weight_decay * weights[lid][name]
                    v = velocity[lid][name]
                    v *= cfg.momentum
                    v += g
                    step = g + cfg.momentum * v if cfg.nesterov else v
                    weights[lid][name] = weights[lid][name] - lr * step
            for lid, tensors in weights.items():
                for name, arr in tensors.items():
                    if not np.all(np.isfinite(arr)):
                        raise DivergenceError(
                            f"training diverged at epoch {epoch}: tensor "
                            f"'{name}' became non-finite", lid)
        mean_loss = float(np.mean(losses))
        if epoch == 0:
            first_epoch_loss = mean_loss
        last_epoch_loss = mean_loss
    if first_epoch_loss is not None and last_epoch_loss > first_epoch_loss:
        log.info("finetune: final epoch loss %.4f above first epoch loss %.4f",
                 last_epoch_loss, first_epoch_loss)
    return graph.replace_weights(weights)
