"""Learn per-layer score offsets with the aging-evolution search.

Raw magnitude scores mispredict each filter's real loss impact by a
layer-dependent amount. The search shifts every layer's scores by a
learned offset so that plain greedy pruning of the shifted scores yields
a smaller measured loss difference on a held batch. The zero-offset
vector sits in the initial pool, so the result can only improve on it.
"""

import numpy as np

from prunekit import ConstraintSpec, EAConfig, FloorPolicy, compute_metrics, search_beta
from prunekit.desknet import make_desk_dataset, pretrained_desk_net

graph = pretrained_desk_net()
train, _ = make_desk_dataset(seed=0)
metrics = compute_metrics(graph, "l2sq")
spec = ConstraintSpec(resource="macs", fraction=0.5).resolve(graph)

cfg = EAConfig(pool_size=12, iterations=40, tournament_size=6,
               fitness_batch_size=384, seed=0)
result = search_beta(graph, metrics, spec, FloorPolicy(), cfg, dataset=train)

print(f"zero-offset loss difference : {result.baseline_fitness:.4f}")
print(f"best found loss difference  : {result.fitness:.4f}")
print(f"unique masks evaluated      : {result.trace.evaluations}")

print("\nlearned offsets by layer (units of the l2sq score):")
for lid, b, sig in zip(graph.prunable_ids, result.beta,
                       metrics.sigma_per_layer):
    print(f"  {lid:10s} beta {b:+9.4f}   (layer score std {sig:.4f})")

print("\nbest-so-far fitness, every 8th iteration:")
t = result.trace
for i in range(0, len(t), 8):
    print(f"  iter {int(t.iteration[i]):3d}  alpha {t.alpha[i]:.2f}  "
          f"candidate {t.fitness[i]:8.4f}  best {t.best_so_far[i]:8.4f}")
