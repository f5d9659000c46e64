"""Exercise the engine: losses, exact gradients, and a tiny training run.

The backward pass is checked here against central finite differences on a
couple of randomly chosen parameters; the test suite does this for every
parameter of several architectures.
"""

import numpy as np

from prunekit import Batch, Dataset, TuneConfig, backward, evaluate, finetune, forward_loss
from prunekit.desknet import build_desk_net, make_desk_dataset

rng = np.random.default_rng(1)

graph = build_desk_net(seed=0)
train, test = make_desk_dataset(seed=0, n_train=512, n_test=256)
batch = train.batch(slice(0, 64))

loss, grads = backward(graph, batch)
print(f"untrained loss on 64 samples: {loss:.4f} (ln 4 = {np.log(4):.4f})")

# spot-check two parameters against central differences
for lid, name, idx in (("conv3", "kernel", (0, 0, 1, 1)), ("conv6_bn", "scale", (3,))):
    step = 1e-5
    w = graph.copy_weights()
    w[lid][name][idx] += step
    up = forward_loss(graph.replace_weights(w), batch)
    w[lid][name][idx] -= 2 * step
    down = forward_loss(graph.replace_weights(w), batch)
    fd = (up - down) / (2 * step)
    an = grads[lid][name][idx]
    print(f"d loss / d {lid}.{name}{list(idx)}: analytic {an:+.6e}, "
          f"finite difference {fd:+.6e}")

cfg = TuneConfig(epochs=2, learning_rate=0.05, lr_drop_epochs=(), batch_size=64, seed=0)
tuned = finetune(graph, train, cfg)
for name, ds in (("train", train), ("test", test)):
    loss, acc = evaluate(tuned, ds)
    print(f"after 2 epochs: {name} loss {loss:.3f}, accuracy {acc:.3f}")
