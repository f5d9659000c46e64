"""Compare mask policies under one MAC budget.

Uniform pruning keeps the same fraction everywhere; global greedy
("naive") ranks all filter groups by score and prunes the cheapest until
the budget holds, so it can empty unimportant layers while keeping
important ones wide. Floors cap how far any layer can shrink.
"""

import numpy as np

from prunekit import (ConstraintSpec, FloorPolicy, compute_metrics, macs,
                      naive_prune, satisfies, schedule_of_mask,
                      layer_scheduled_prune, uniform_prune)
from prunekit.pruners import uniform_keep_fraction
from prunekit.desknet import build_desk_net

graph = build_desk_net(seed=0)
metrics = compute_metrics(graph, "l2sq")
spec = ConstraintSpec(resource="macs", fraction=0.5).resolve(graph)
floor = FloorPolicy(0.10)
print(f"budget: {spec.zeta} MACs ({spec.fraction:.0%} of {macs(graph).total})")

z_greedy = naive_prune(graph, metrics.per_group, spec, floor)
# keep fraction != MAC fraction: meeting 50% MACs uniformly needs ~70% kept
kf = uniform_keep_fraction(graph, metrics, spec, floor)
print(f"uniform keep fraction for this budget: {kf:.3f}")
z_uniform = uniform_prune(graph, metrics, kf, floor)

print(f"\n{'layer':10s} {'width':>5s} {'greedy':>7s} {'uniform':>8s}")
for lid in graph.prunable_ids:
    sl = graph.filter_slice(lid)
    print(f"{lid:10s} {graph.layer_width(lid):5d} "
          f"{int(z_greedy[sl].sum()):7d} {int(z_uniform[sl].sum()):8d}")

for name, z in (("greedy", z_greedy), ("uniform", z_uniform)):
    print(f"{name:8s}: {macs(graph, z).total:>8d} MACs, "
          f"budget satisfied: {satisfies(graph, z, spec)}")

# a greedy mask's survivor counts work as an explicit per-layer schedule
schedule = schedule_of_mask(graph, z_greedy)
z_again = layer_scheduled_prune(graph, metrics, schedule, floor)
print("\ngreedy survivor counts as a schedule:", schedule)
print("schedule reproduces the greedy mask:", bool(np.array_equal(z_again, z_greedy)))
