"""Shared test fixtures: random architectures and independent oracles.

The oracles here deliberately avoid the library's fast paths: gradients
come from central finite differences on the loss, and MAC counts come
from running a naive convolution loop that increments a counter per
scalar multiplication.
"""

import numpy as np

from prunekit import Batch, engine, forward_loss
from prunekit import model as M

TRAINABLE = ("kernel", "bias", "scale", "shift")


# -- random architectures -----------------------------------------------------

def _conv_weights(rng, cin, cout, kh, kw, scale=0.5):
    fan = max(1, cin * kh * kw)
    return {
        "kernel": rng.normal(0.0, scale / np.sqrt(fan), (cout, cin, kh, kw)),
        "bias": rng.normal(0.0, 0.05, cout),
    }


def _bn_weights(rng, c):
    return {
        "scale": rng.uniform(0.7, 1.3, c),
        "shift": rng.normal(0.0, 0.1, c),
        "running_mean": rng.normal(0.0, 0.2, c),
        "running_var": rng.uniform(0.5, 1.5, c),
    }


def random_net(rng, n_adds=0, n_convs=None, classes=3, hidden_dense=False,
               max_channels=5, size=None):
    """Small random valid net touching every layer kind.

    `n_adds` residual additions are chained onto the first conv stage, so
    values above 1 exercise the transitive group closure.
    """
    c0 = int(rng.integers(1, 4))
    hw = int(size if size is not None else rng.integers(5, 9))
    layers = [M.input_layer("input", c0, hw, hw)]
    weights = {}

    def conv_block(i, pred, cin, cout, stride=1, k=3, pad=1, with_bn=True):
        layers.append(M.conv2d(f"conv{i}", pred, cin, cout,
                               kernel=k, stride=stride, padding=pad))
        weights[f"conv{i}"] = _conv_weights(rng, cin, cout, k, k)
        top = f"conv{i}"
        if with_bn:
            layers.append(M.batchnorm(f"conv{i}_bn", top))
            weights[f"conv{i}_bn"] = _bn_weights(rng, cout)
            top = f"conv{i}_bn"
        layers.append(M.relu(f"conv{i}_relu", top))
        return f"conv{i}_relu"

    c = int(rng.integers(2, max_channels + 1))
    prev = conv_block(0, "input", c0, c)
    h = hw
    idx = 1
    # residual chain: each add joins a fresh conv of the same width
    join = prev
    for _ in range(n_adds):
        branch = conv_block(idx, join, c, c, with_bn=bool(rng.integers(2)))
        layers.append(M.add(f"add{idx}", join, branch))
        layers.append(M.relu(f"add{idx}_relu", f"add{idx}"))
        join = f"add{idx}_relu"
        idx += 1
    prev = join
    extra = int(n_convs if n_convs is not None else rng.integers(0, 3))
    for _ in range(extra):
        cout = int(rng.integers(2, max_channels + 1))
        k = int(rng.choice([1, 3])) if h >= 3 else 1
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        if h + 2 * pad - k < 0:
            k, stride, pad = 1, 1, 0
        prev = conv_block(idx, prev, c, cout, stride=stride, k=k, pad=pad,
                          with_bn=bool(rng.integers(2)))
        h = (h + 2 * pad - k) // stride + 1
        c = cout
        idx += 1
    layers.append(M.global_avg_pool("pool", prev))
    prev, width = "pool", c
    if hidden_dense:
        units = int(rng.integers(2, 5))
        layers.append(M.dense("hidden", prev, width, units, prunable=True))
        weights["hidden"] = {
            "kernel": rng.normal(0.0, 0.4, (units, width)),
            "bias": rng.normal(0.0, 0.05, units),
        }
        layers.append(M.relu("hidden_relu", "hidden"))
        prev, width = "hidden_relu", units
    layers.append(M.dense("classifier", prev, width, classes))
    weights["classifier"] = {
        "kernel": rng.normal(0.0, 0.4, (classes, width)),
        "bias": rng.normal(0.0, 0.05, classes),
    }
    layers.append(M.softmax_ce("loss", "classifier"))
    return M.NetworkGraph(layers, weights)


def random_batch(rng, graph, n=4):
    desc = graph.layer(graph.input_id)
    classes = graph.layer(graph.layer(graph.loss_id).predecessors[0]).out_channels
    return Batch(
        inputs=rng.normal(0.0, 1.0, (n, desc.channels, desc.height, desc.width)),
        labels=rng.integers(0, classes, n).astype(np.int64),
    )


def random_group_mask(rng, graph, keep_prob=0.7):
    """Group-consistent mask with at least one survivor per layer."""
    groups = graph.filter_groups()
    while True:
        z = np.ones(graph.K, dtype=bool)
        for g in groups.groups:
            if rng.random() > keep_prob:
                z[list(g)] = False
        if all(z[graph.filter_slice(lid)].any() for lid in graph.prunable_ids):
            return z


# -- finite-difference gradient oracle ----------------------------------------

def relu_kink_margin(graph, batch, z=None, train_mode=False):
    """Smallest |pre-relu activation|, ignoring exactly-zero (masked) entries.

    Central differences are only a valid oracle away from the relu kink: a
    unit within ~step of zero flips sides during probing. Callers should
    redraw nets/batches until this margin comfortably exceeds the step.
    """
    _, _, p = engine._run(graph, batch, z, train=train_mode)
    margin = np.inf
    for lid in graph.topo_order:
        if graph.layer(lid).kind == "relu":
            ax = np.abs(p.acts[graph.layer(lid).predecessors[0]])
            ax = ax[ax > 0.0]
            if ax.size:
                margin = min(margin, float(ax.min()))
    return margin


def stable_gradcheck_case(rng, make_net, make_batch, z_maker=None,
                          margin=1e-4, train_mode=False):
    """Draw (net, batch[, mask]) until the FD oracle is kink-safe."""
    while True:
        g = make_net(rng)
        batch = make_batch(rng, g)
        z = z_maker(rng, g) if z_maker else None
        if relu_kink_margin(g, batch, z, train_mode) > margin:
            return (g, batch, z) if z_maker else (g, batch)


def fd_gradients(graph, batch, z=None, step=1e-5, train_mode=False):
    """Central-difference gradients of the batch loss for every trainable tensor."""
    weights = graph.copy_weights()

    def loss_with(w):
        out, _, _ = engine._run(graph, batch, z, weights=w, train=train_mode)
        return out

    grads = {}
    for lid, tensors in weights.items():
        for name, arr in tensors.items():
            if name not in TRAINABLE:
                continue
            g = np.zeros_like(arr)
            flat, gflat = arr.ravel(), g.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                plus = loss_with(weights)
                flat[i] = orig - step
                minus = loss_with(weights)
                flat[i] = orig
                gflat[i] = (plus - minus) / (2.0 * step)
            grads.setdefault(lid, {})[name] = g
    return grads


def max_grad_error(analytic, numeric):
    """Worst relative error, with the denominator floored at 1 so that
    near-zero gradients are compared absolutely."""
    worst = 0.0
    for lid, tensors in numeric.items():
        for name, g_num in tensors.items():
            g_ana = analytic[lid][name]
            denom = np.maximum(np.maximum(np.abs(g_ana), np.abs(g_num)), 1.0)
            worst = max(worst, float((np.abs(g_ana - g_num) / denom).max()))
    return worst


# -- instrumented multiply-count oracle ----------------------------------------

def counted_multiplies(graph):
    """Run a naive convolution/matmul loop over the graph, counting every
    scalar multiplication performed on weight entries.

    Activations are dummies (ones); batchnorm/relu/pool/add perform no
    counted work, matching the reported MAC convention.
    """
    count = 0
    feats = {}
    for lid in graph.topo_order:
        desc = graph.layer(lid)
        if desc.kind == "input":
            feats[lid] = np.ones((desc.channels, desc.height, desc.width))
        elif desc.kind == "conv2d":
            x = feats[desc.predecessors[0]]
            kern = graph.weights[lid]["kernel"]
            co, ci, kh, kw = kern.shape
            p, s = desc.padding, desc.stride
            xp = np.pad(x, ((0, 0), (p, p), (p, p)))
            ho = (x.shape[1] + 2 * p - kh) // s + 1
            wo = (x.shape[2] + 2 * p - kw) // s + 1
            out = np.zeros((co, ho, wo))
            for o in range(co):
                for i in range(ci):
                    for y in range(ho):
                        for xx in range(wo):
                            acc = 0.0
                            for u in range(kh):
                                for v in range(kw):
                                    acc += kern[o, i, u, v] * xp[i, y * s + u, xx * s + v]
                                    count += 1
                            out[o, y, xx] += acc
            feats[lid] = out
        elif desc.kind == "dense":
            x = feats[desc.predecessors[0]]
            kern = graph.weights[lid]["kernel"]
            out = np.zeros(kern.shape[0])
            for o in range(kern.shape[0]):
                for i in range(kern.shape[1]):
                    out[o] += kern[o, i] * x[i]
                    count += 1
            feats[lid] = out
        elif desc.kind == "global_avg_pool":
            feats[lid] = feats[desc.predecessors[0]].mean(axis=(1, 2))
        elif desc.kind == "add":
            feats[lid] = feats[desc.predecessors[0]] + feats[desc.predecessors[1]]
        else:  # batchnorm, relu, softmax_ce: zero counted multiplies
            feats[lid] = feats[desc.predecessors[0]]
    return count
