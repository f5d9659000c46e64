"""Masks vs physical pruning, and how costs respond.

A mask zeroes a filter's output channel everywhere it flows; physically
applying the mask removes kernel rows, consumer input slices, and
batchnorm rows. The two give the same loss to rounding error, which is
what lets the search machinery price masks without rebuilding networks.
"""

import numpy as np

from prunekit import apply_mask, forward_loss, full_mask, macs, params
from prunekit.desknet import build_desk_net, make_desk_dataset

graph = build_desk_net(seed=0)
train, _ = make_desk_dataset(seed=0, n_train=256, n_test=16)
batch = train.batch(slice(0, 64))

print(f"full model: {macs(graph).total} MACs / {params(graph).total} params")

# prune every other group (residual pairs stay together by construction)
z = full_mask(graph)
for gi, members in enumerate(graph.filter_groups().groups):
    if gi % 2 == 1 and all(
            z[graph.filter_slice(lid)].sum() > 2
            for lid in {graph.prunable_ids[graph.filter_layer[j]] for j in members}):
        z[list(members)] = False

masked_loss = forward_loss(graph, batch, z)
pruned = apply_mask(graph, z)
physical_loss = forward_loss(pruned, batch)
print(f"\nmask keeps {int(z.sum())}/{graph.K} filters")
print(f"masked-forward loss   {masked_loss:.12f}")
print(f"physically-pruned loss {physical_loss:.12f}")
print(f"difference {abs(masked_loss - physical_loss):.2e}")

print(f"\npruned model: {macs(graph, z).total} MACs / {params(graph, z).total} params")
print("per-layer MACs (pruned / full):")
full_report, cut_report = macs(graph), macs(graph, z)
for lid, full_count in full_report.per_layer.items():
    if full_count:
        print(f"  {lid:12s} {cut_report.per_layer[lid]:>9d} / {full_count}")
