"""Engine correctness: gradients vs finite differences, mask semantics, SGD."""

import numpy as np
import pytest

from helpers import (fd_gradients, max_grad_error, random_batch,
                     random_group_mask, random_net, stable_gradcheck_case)
from prunekit import (Batch, Dataset, DivergenceError, TuneConfig, apply_mask,
                      backward, evaluate, finetune, forward_loss, loss_delta,
                      single_filter_deltas)
from prunekit import model as M
from prunekit.errors import FormatError


def dense_only_net(in_dim=3, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    layers = [
        M.input_layer("input", in_dim, 1, 1),
        M.global_avg_pool("pool", "input"),
        M.dense("fc", "pool", in_dim, classes),
        M.softmax_ce("loss", "fc"),
    ]
    weights = {"fc": {"kernel": rng.normal(0, 0.5, (classes, in_dim)),
                      "bias": rng.normal(0, 0.1, classes)}}
    return M.NetworkGraph(layers, weights)


class TestForward:
    def test_near_zero_logits_give_ln_k(self):
        rng = np.random.default_rng(0)
        g = random_net(rng, classes=2)
        # shrink the classifier so logits are almost zero
        weights = g.copy_weights()
        weights["classifier"]["kernel"] *= 1e-4
        weights["classifier"]["bias"] *= 1e-4
        g = g.replace_weights(weights)
        batch = random_batch(rng, g, n=256)
        assert abs(forward_loss(g, batch) - np.log(2)) < 0.1

    def test_all_ones_mask_bit_exact(self):
        rng = np.random.default_rng(1)
        g = random_net(rng, n_adds=1)
        batch = random_batch(rng, g)
        z = np.ones(g.K, dtype=bool)
        assert forward_loss(g, batch, z) == forward_loss(g, batch)

    def test_masked_equals_physical(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            g = random_net(rng, n_adds=int(rng.integers(0, 3)), hidden_dense=True)
            batch = random_batch(rng, g, n=6)
            z = random_group_mask(rng, g)
            assert abs(forward_loss(g, batch, z)
                       - forward_loss(apply_mask(g, z), batch)) <= 1e-9

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        g = random_net(rng)
        batch = random_batch(rng, g)
        bad = Batch(batch.inputs[:, :, :-1, :], batch.labels)
        with pytest.raises(FormatError):
            forward_loss(g, bad)

    def test_label_out_of_range_rejected(self):
        g = dense_only_net(classes=3)
        batch = Batch(np.zeros((2, 3, 1, 1)), np.array([0, 3]))
        with pytest.raises(FormatError):
            forward_loss(g, batch)

    def test_nonfinite_activation_names_layer(self):
        g = dense_only_net()
        weights = g.copy_weights()
        weights["fc"]["kernel"][:] = 1e308
        g = g.replace_weights(weights)
        batch = Batch(np.full((2, 3, 1, 1), 1e30), np.array([0, 1]))
        with pytest.raises(DivergenceError, match="fc"):
            forward_loss(g, batch)


class TestBackward:
    def test_matches_finite_differences_everywhere(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for i in range(5):
            g, batch = stable_gradcheck_case(
                rng,
                lambda r: random_net(r, n_adds=int(r.integers(0, 2)),
                                     hidden_dense=True, max_channels=3, size=5),
                lambda r, g: random_batch(r, g, n=3))
            _, grads = backward(g, batch)
            err = max_grad_error(grads, fd_gradients(g, batch))
            worst = max(worst, err)
        assert worst < 1e-5

    def test_train_mode_batchnorm_gradients(self):
        rng = np.random.default_rng(6)
        g, batch = stable_gradcheck_case(
            rng,
            lambda r: random_net(r, n_adds=1, max_channels=3, size=5),
            lambda r, g: random_batch(r, g, n=4),
            train_mode=True)
        _, grads = backward(g, batch, train_mode=True)
        err = max_grad_error(grads, fd_gradients(g, batch, train_mode=True))
        assert err < 1e-5

    def test_masked_gradcheck_and_zero_rows(self):
        rng = np.random.default_rng(7)
        g, batch, z = stable_gradcheck_case(
            rng,
            lambda r: random_net(r, n_adds=0, n_convs=1, max_channels=4, size=5),
            lambda r, g: random_batch(r, g, n=3),
            z_maker=lambda r, g: random_group_mask(r, g, keep_prob=0.5))
        _, grads = backward(g, batch, z)
        assert max_grad_error(grads, fd_gradients(g, batch, z)) < 1e-5
        for lid in g.prunable_ids:
            dead = ~z[g.filter_slice(lid)]
            np.testing.assert_array_equal(
                grads[lid]["kernel"][dead], 0.0)
            np.testing.assert_array_equal(grads[lid]["bias"][dead], 0.0)

    def test_dense_softmax_closed_form(self):
        g = dense_only_net(in_dim=3, classes=3)
        rng = np.random.default_rng(8)
        x = rng.normal(0, 1, (16, 3, 1, 1))
        y = rng.integers(0, 3, 16).astype(np.int64)
        batch = Batch(x, y)
        loss, grads = backward(g, batch)
        # closed form: dW = (p - onehot)^T x / N
        feats = x[:, :, 0, 0]
        logits = feats @ g.weights["fc"]["kernel"].T + g.weights["fc"]["bias"]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        onehot = np.eye(3)[y]
        dW = (p - onehot).T @ feats / 16
        db = (p - onehot).mean(axis=0)
        np.testing.assert_allclose(grads["fc"]["kernel"], dW, atol=1e-12)
        np.testing.assert_allclose(grads["fc"]["bias"], db, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        g = random_net(rng, n_adds=1)
        batch = random_batch(rng, g)
        l1, g1 = backward(g, batch)
        l2, g2 = backward(g, batch)
        assert l1 == l2
        for lid in g1:
            for name in g1[lid]:
                np.testing.assert_array_equal(g1[lid][name], g2[lid][name])


class TestLossDelta:
    def test_all_ones_zero(self):
        rng = np.random.default_rng(10)
        g = random_net(rng)
        batch = random_batch(rng, g)
        assert loss_delta(g, batch, np.ones(g.K, dtype=bool)) == 0.0

    def test_extreme_filters_ordered(self):
        rng = np.random.default_rng(11)
        g = random_net(rng, n_adds=0, n_convs=1)
        batch = random_batch(rng, g, n=16)
        deltas = single_filter_deltas(g, batch)
        groups = g.filter_groups().groups
        hi, lo = int(np.argmax(deltas)), int(np.argmin(deltas))
        zhi = np.ones(g.K, dtype=bool)
        zhi[list(groups[hi])] = False
        zlo = np.ones(g.K, dtype=bool)
        zlo[list(groups[lo])] = False
        assert loss_delta(g, batch, zhi) >= loss_delta(g, batch, zlo)

    def test_single_filter_deltas_contract(self):
        rng = np.random.default_rng(12)
        g = random_net(rng, n_adds=1)
        batch = random_batch(rng, g)
        deltas = single_filter_deltas(g, batch)
        assert len(deltas) == len(g.filter_groups())
        assert np.all(deltas >= 0) and np.all(np.isfinite(deltas))

    def test_two_filter_net_matches_manual(self):
        rng = np.random.default_rng(13)
        g = random_net(rng, n_adds=0, n_convs=0, max_channels=2)
        assert g.K == 2
        batch = random_batch(rng, g)
        deltas = single_filter_deltas(g, batch)
        for j in range(2):
            z = np.ones(2, dtype=bool)
            z[j] = False
            assert deltas[j] == loss_delta(g, batch, z)


def separable_dataset(n=120, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n).astype(np.int64)
    centers = np.array([[-1.5, -1.5], [1.5, 1.5]])
    pts = centers[labels] + rng.normal(0, 0.4, (n, 2))
    return Dataset(inputs=pts.reshape(n, 2, 1, 1), labels=labels)


def fit_logistic_regression(ds, epochs=200, lr=0.5):
    """Plain-numpy logistic regression, the sanity oracle for finetune."""
    x = ds.inputs[:, :, 0, 0]
    w = np.zeros((2, 2))
    b = np.zeros(2)
    onehot = np.eye(2)[ds.labels]
    for _ in range(epochs):
        logits = x @ w.T + b
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        w -= lr * (p - onehot).T @ x / len(x)
        b -= lr * (p - onehot).mean(axis=0)
    logits = x @ w.T + b
    return float((logits.argmax(axis=1) == ds.labels).mean())


class TestFinetune:
    def test_zero_epochs_identity(self):
        rng = np.random.default_rng(14)
        g = random_net(rng)
        ds = Dataset(inputs=random_batch(rng, g, n=8).inputs,
                     labels=random_batch(rng, g, n=8).labels)
        out = finetune(g, ds, TuneConfig(epochs=0))
        for lid, tensors in g.weights.items():
            for name, arr in tensors.items():
                np.testing.assert_array_equal(arr, out.weights[lid][name])

    def test_separable_toy_reaches_95(self):
        ds = separable_dataset()
        # oracle first: logistic regression solves this data
        assert fit_logistic_regression(ds) >= 0.95
        g = dense_only_net(in_dim=2, classes=2, seed=3)
        cfg = TuneConfig(epochs=50, learning_rate=0.5, lr_drop_epochs=(),
                         batch_size=16, seed=0)
        tuned = finetune(g, ds, cfg)
        _, acc = evaluate(tuned, ds)
        assert acc >= 0.95

    def test_seeded_runs_bit_identical(self):
        rng = np.random.default_rng(15)
        g = random_net(rng, n_adds=1)
        batch = random_batch(rng, g, n=32)
        ds = Dataset(inputs=batch.inputs, labels=batch.labels)
        cfg = TuneConfig(epochs=3, learning_rate=0.01, batch_size=8, seed=42)
        a, b = finetune(g, ds, cfg), finetune(g, ds, cfg)
        for lid, tensors in a.weights.items():
            for name, arr in tensors.items():
                np.testing.assert_array_equal(arr, b.weights[lid][name])

    def test_divergence_aborts(self):
        rng = np.random.default_rng(16)
        g = random_net(rng, n_adds=0, n_convs=2, max_channels=4)
        batch = random_batch(rng, g, n=16)
        ds = Dataset(inputs=batch.inputs, labels=batch.labels)
        cfg = TuneConfig(epochs=5, learning_rate=1e120, batch_size=8)
        with pytest.raises(DivergenceError):
            finetune(g, ds, cfg)

    def test_lr_schedule(self):
        cfg = TuneConfig(epochs=10, learning_rate=0.1, lr_drop_factor=0.1,
                         lr_drop_epochs=(4, 8))
        assert cfg.lr_at(0) == 0.1
        assert cfg.lr_at(4) == pytest.approx(0.01)
        assert cfg.lr_at(9) == pytest.approx(0.001)
