"""Build a small network, round-trip it through the interchange bundle.

The graph is a plain DAG of layer descriptors plus float64 weight arrays.
Bundles are directories: `model.json` describes layers and tensors, and
each tensor lives in a raw little-endian float32 blob.
"""

import tempfile
from pathlib import Path

import numpy as np

from prunekit import load_model, macs, params, save_model
from prunekit import model as M

rng = np.random.default_rng(0)

# input -> conv -> bn -> relu -> (residual conv) -> add -> pool -> classifier
layers = [
    M.input_layer("input", channels=3, height=8, width=8),
    M.conv2d("stem", "input", 3, 8),
    M.batchnorm("stem_bn", "stem"),
    M.relu("stem_relu", "stem_bn"),
    M.conv2d("branch", "stem_relu", 8, 8),
    M.add("join", "stem_relu", "branch"),
    M.relu("join_relu", "join"),
    M.global_avg_pool("pool", "join_relu"),
    M.dense("classifier", "pool", 8, 4),
    M.softmax_ce("loss", "classifier"),
]
weights = {
    "stem": {"kernel": rng.normal(0, 0.3, (8, 3, 3, 3)), "bias": np.zeros(8)},
    "stem_bn": {"scale": np.ones(8), "shift": np.zeros(8),
                "running_mean": np.zeros(8), "running_var": np.ones(8)},
    "branch": {"kernel": rng.normal(0, 0.3, (8, 8, 3, 3)), "bias": np.zeros(8)},
    "classifier": {"kernel": rng.normal(0, 0.3, (4, 8)), "bias": np.zeros(4)},
}
graph = M.NetworkGraph(layers, weights)

print(f"{graph.K} prunable filters across {graph.L} layers")
print(f"forward cost: {macs(graph).total} MACs, {params(graph).total} parameters")

# the residual add couples stem and branch filters position by position
groups = graph.filter_groups()
coupled = [g for g in groups.groups if len(g) > 1]
print(f"{len(groups)} prune groups, {len(coupled)} of them residual-coupled")
print("first coupled group (global filter indices):", coupled[0])

with tempfile.TemporaryDirectory() as tmp:
    bundle = save_model(graph, Path(tmp) / "demo_model")
    print("\nbundle files:", sorted(p.name for p in bundle.iterdir())[:4], "...")
    again = load_model(bundle)
    print("reloaded:", again.K, "filters --", "validation passed")
    # canonical serialization: saving the reloaded graph is bit-identical
    twice = save_model(again, Path(tmp) / "again")
    same = all((bundle / p.name).read_bytes() == (twice / p.name).read_bytes()
               for p in bundle.iterdir())
    print("round-trip bit-identical:", same)
