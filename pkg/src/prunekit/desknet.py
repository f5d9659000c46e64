"""Reference desk-scale network and its synthetic dataset.

An 8-layer net (7 convs with one residual block, then a fixed 4-way
classifier) sized for laptop-CPU experiments: 124 prunable filters,
~18k parameters, ~2.2M MACs at 3x16x16 input.

The dataset is a seeded 4-class image set: each class owns a smooth
random template, and samples are jittered, shifted, noisy copies of it.
A trained copy of the net ships with the package (see
:func:`pretrained_desk_net`); ``scripts/train_desknet.py`` regenerates it.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from . import model
from .bundle import Dataset, load_model

DESK_CLASSES = 4
DESK_CHANNELS = 3
DESK_SIZE = 16

# (id, in, out, stride) for the conv stack; the residual add joins the
# stem's post-activation output with conv2's batchnorm output, so the stem
# is coupled into the block the way resnet stages couple onto their trunk.
_CONVS = (
    ("conv1", 3, 16, 1),
    ("conv2", 16, 16, 1),
    ("conv3", 16, 16, 1),
    ("conv4", 16, 20, 2),
    ("conv5", 20, 20, 1),
    ("conv6", 20, 24, 2),
    ("conv7", 24, 24, 1),
)


def build_desk_net(seed: int = 0) -> model.NetworkGraph:
    """The untrained reference net with seeded He-normal kernels."""
    rng = np.random.default_rng(seed)
    layers = [model.input_layer("input", DESK_CHANNELS, DESK_SIZE, DESK_SIZE)]
    weights = {}
    prev = "input"
    for name, cin, cout, stride in _CONVS:
        layers.append(model.conv2d(name, prev, cin, cout, stride=stride))
        layers.append(model.batchnorm(f"{name}_bn", name))
        weights[name] = _conv_init(rng, cin, cout)
        weights[f"{name}_bn"] = _bn_init(cout)
        if name == "conv2":
            layers.append(model.add("res_add", "conv1_relu", "conv2_bn"))
            layers.append(model.relu("conv2_relu", "res_add"))
        else:
            layers.append(model.relu(f"{name}_relu", f"{name}_bn"))
        prev = f"{name}_relu"
    layers.append(model.global_avg_pool("pool", prev))
    layers.append(model.dense("classifier", "pool", 24, DESK_CLASSES))
    weights["classifier"] = {
        "kernel": rng.normal(0.0, np.sqrt(2.0 / 24), (DESK_CLASSES, 24)),
        "bias": np.zeros(DESK_CLASSES),
    }
    layers.append(model.softmax_ce("loss", "classifier"))
    return model.NetworkGraph(layers, weights)


def _conv_init(rng, cin, cout, k=3):
    fan_in = cin * k * k
    return {
        "kernel": rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k)),
        "bias": np.zeros(cout),
    }


def _bn_init(c):
    return {
        "scale": np.ones(c),
        "shift": np.zeros(c),
        "running_mean": np.zeros(c),
        "running_var": np.ones(c),
    }


def _smooth_patterns(rng, count):
    """Smooth random patterns built from a few low-frequency waves each."""
    yy, xx = np.meshgrid(np.arange(DESK_SIZE), np.arange(DESK_SIZE), indexing="ij")
    out = np.zeros((count, DESK_CHANNELS, DESK_SIZE, DESK_SIZE))
    for k in range(count):
        for c in range(DESK_CHANNELS):
            pattern = np.zeros((DESK_SIZE, DESK_SIZE))
            for _ in range(3):
                fy, fx = rng.uniform(0.3, 1.2, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                pattern += rng.uniform(0.5, 1.0) * np.sin(fy * yy + fx * xx + phase)
            out[k, c] = pattern / np.abs(pattern).max()
    return out


def make_desk_dataset(seed: int = 0, n_train: int = 4000, n_test: int = 1000,
                      noise: float = 1.0, n_styles: int = 8,
                      style_weight: float = 1.0, template_weight: float = 0.9):
    """(train, test) splits of the synthetic 4-class image set.

    Each sample mixes a weak class template with one of a few shared
    nuisance "style" patterns, gets shifted a few pixels, and is buried in
    Gaussian noise, so the task needs real capacity without being
    unlearnable.
    """
    rng = np.random.default_rng(seed)
    templates = _smooth_patterns(rng, DESK_CLASSES)
    styles = _smooth_patterns(rng, n_styles)

    def split(n):
        labels = rng.integers(0, DESK_CLASSES, size=n)
        style_ids = rng.integers(0, n_styles, size=n)
        amps = rng.uniform(0.8, 1.2, size=n)
        shifts = rng.integers(-3, 4, size=(n, 2))
        inputs = np.empty((n, DESK_CHANNELS, DESK_SIZE, DESK_SIZE))
        for i in range(n):
            base = (template_weight * templates[labels[i]]
                    + style_weight * styles[style_ids[i]])
            base = np.roll(base, tuple(shifts[i]), axis=(1, 2))
            inputs[i] = amps[i] * base
        inputs += noise * rng.standard_normal(inputs.shape)
        return Dataset(inputs=inputs, labels=labels.astype(np.int64))

    return split(n_train), split(n_test)


def pretrained_desk_net() -> model.NetworkGraph:
    """The shipped desk net trained on make_desk_dataset(seed=0)."""
    root = resources.files("prunekit.assets") / "desknet"
    with resources.as_file(root) as path:
        return load_model(path)
