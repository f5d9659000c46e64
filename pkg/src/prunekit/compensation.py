"""Per-layer score offsets learned by regularized evolution.

The search variable is one offset per prunable layer. A candidate's
fitness is the measured loss difference of the mask the global greedy
pruner produces from the offset-adjusted scores, evaluated on one batch
that stays fixed for the whole search. Candidates that cannot meet the
budget get infinite fitness instead of being repaired, so the search
space stays unconstrained.

The evolution loop is the aging kind: sample a tournament, mutate its
fittest member, retire the oldest pool member. The zero-offset vector is
always seeded into the initial pool, which guarantees the search never
returns anything worse than plain greedy pruning on the fitness batch.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .bundle import Batch, Dataset, sample_batch
from .cost import ConstraintSpec
from .errors import FormatError, InfeasibleConstraintError
from .metrics import MetricVector, compensated_scores, sampling_sigma
from .model import apply_mask
from .pruners import FloorPolicy, naive_prune


@dataclass(frozen=True)
class EAConfig:
    """Evolution hyper-parameters.

    `mutation_count` defaults to a tenth of the layer count (at least 1).
    `alpha` is the mutation step scale; it decays linearly from 1 to 0
    across iterations unless `alpha_increasing` flips the ramp (the
    increasing variant is kept behind this switch for comparison).
    """

    pool_size: int = 64
    iterations: int = 336
    tournament_size: int = 16
    mutation_count: int | None = None
    alpha_increasing: bool = False
    fitness_batch_size: int = 3000
    seed: int = 0

    def __post_init__(self):
        if not self.pool_size >= self.tournament_size >= 1:
            raise FormatError("need pool_size >= tournament_size >= 1")
        if self.iterations < 0:
            raise FormatError("iterations must be >= 0")

    def resolved_mutation_count(self, num_layers: int) -> int:
        d = self.mutation_count
        if d is None:
            d = max(1, math.ceil(0.1 * num_layers))
        if not 1 <= d <= num_layers:
            raise FormatError(
                f"mutation_count {d} outside [1, {num_layers}]")
        return d

    def alpha_at(self, iteration: int) -> float:
        if self.iterations == 0:
            return 0.0
        frac = iteration / self.iterations
        return frac if self.alpha_increasing else 1.0 - frac


@dataclass
class SearchTrace:
    """Per-iteration search record plus the initial pool's fitnesses."""

    iteration: np.ndarray
    fitness: np.ndarray
    best_so_far: np.ndarray
    alpha: np.ndarray
    initial_fitness: np.ndarray
    evaluations: int = 0

    def __len__(self):
        return len(self.iteration)


@dataclass
class SearchResult:
    beta: np.ndarray
    mask: np.ndarray
    trace: SearchTrace
    fitness: float
    baseline_fitness: float  # fitness of the zero-offset candidate


class _FitnessOracle:
    """Caches fitness by mask bytes: equal masks always get equal fitness.

    Candidate losses are measured on the physically pruned graph rather
    than through a masked forward pass; the two agree to rounding error
    and the pruned network is proportionally cheaper to evaluate.
    """

    def __init__(self, graph, metrics, spec, floor, batch):
        self.graph = graph
        self.metrics = metrics
        self.spec = spec
        self.floor = floor
        self.batch = batch
        self.base_loss = engine.forward_loss(graph, batch)
        self._cache = {}
        self.evaluations = 0
        self.min_achievable = None

    def mask_for(self, beta):
        try:
            return naive_prune(self.graph, compensated_scores(self.metrics, beta),
                               self.spec, self.floor)
        except InfeasibleConstraintError as e:
            self.min_achievable = e.min_achievable
            return None

    def __call__(self, beta):
        z = self.mask_for(beta)
        if z is None:
            return math.inf, None
        key = z.tobytes()
        if key not in self._cache:
            pruned_loss = engine.forward_loss(apply_mask(self.graph, z), self.batch)
            self._cache[key] = abs(self.base_loss - pruned_loss)
            self.evaluations += 1
        return self._cache[key], z


def fitness(graph, metrics: MetricVector, beta, spec: ConstraintSpec,
            floor: FloorPolicy, fitness_batch: Batch) -> float:
    """Measured loss delta of the greedy mask under offset-adjusted scores.

    Returns ``inf`` when the offsets make the budget unreachable.
    """
    if spec.zeta is None:
        spec = spec.resolve(graph)
    return _FitnessOracle(graph, metrics, spec, floor, fitness_batch)(beta)[0]


def init_pool(metrics: MetricVector, cfg: EAConfig,
              rng: np.random.Generator, oracle) -> deque:
    """Seeded candidate pool; slot 0 is always the zero-offset vector."""
    sigma = sampling_sigma(metrics)
    pool = deque()
    for i in range(cfg.pool_size):
        if i == 0:
            beta = np.zeros(metrics.num_layers)
        else:
            beta = rng.normal(0.0, 1.0, metrics.num_layers) * sigma
        fit, _ = oracle(beta)
        pool.append((beta, fit))
    return pool


def mutate(parent, alpha: float, metrics: MetricVector, cfg: EAConfig,
           rng: np.random.Generator) -> np.ndarray:
    """Perturb a random coordinate subset with layer-scaled noise."""
    sigma = sampling_sigma(metrics)
    d = cfg.resolved_mutation_count(metrics.num_layers)
    subset = rng.choice(metrics.num_layers, size=d, replace=False)
    child = np.array(parent, dtype=np.float64, copy=True)
    child[subset] += rng.normal(0.0, 1.0, d) * alpha * sigma[subset]
    return child


def search_beta(graph, metrics: MetricVector, spec: ConstraintSpec,
                floor: FloorPolicy, cfg: EAConfig,
                dataset: Dataset | None = None,
                fitness_batch: Batch | None = None) -> SearchResult:
    """Run the aging-evolution search and return the best offsets seen.

    The fitness batch is sampled once from `dataset` with the run seed
    (or passed in directly) and shared by every candidate. The best-ever
    candidate is tracked from the initial pool onward, so the result is
    never worse than the zero-offset baseline on that batch.
    """
    if spec.zeta is None:
        spec = spec.resolve(graph)
    rng = np.random.default_rng(cfg.seed)
    if fitness_batch is None:
        if dataset is None:
            raise FormatError("search needs a dataset or an explicit fitness batch")
        fitness_batch = sample_batch(dataset, min(cfg.fitness_batch_size, dataset.n), rng)
    oracle = _FitnessOracle(graph, metrics, spec, floor, fitness_batch)

    pool = init_pool(metrics, cfg, rng, oracle)
    initial_fitness = np.array([f for _, f in pool])
    baseline = float(initial_fitness[0])
    best_beta, best_fit = None, math.inf
    for beta, fit in pool:
        if fit < best_fit:
            best_beta, best_fit = beta, fit

    its = np.arange(cfg.iterations)
    fits = np.empty(cfg.iterations)
    bests = np.empty(cfg.iterations)
    alphas = np.empty(cfg.iterations)
    for i in range(cfg.iterations):
        alpha = cfg.alpha_at(i)
        picks = rng.choice(cfg.pool_size, size=cfg.tournament_size, replace=False)
        parent = min((pool[int(p)] for p in sorted(picks)), key=lambda c: c[1])[0]
        child = mutate(parent, alpha, metrics, cfg, rng)
        fit, _ = oracle(child)
        pool.append((child, fit))
        pool.popleft()
        if fit < best_fit:
            best_beta, best_fit = child, fit
        fits[i] = fit
        bests[i] = best_fit
        alphas[i] = alpha

    if not math.isfinite(best_fit):
        raise InfeasibleConstraintError(spec.resource, spec.zeta,
                                        oracle.min_achievable)
    best_mask = oracle.mask_for(best_beta)
    trace = SearchTrace(iteration=its, fitness=fits, best_so_far=bests,
                        alpha=alphas, initial_fitness=initial_fitness,
                        evaluations=oracle.evaluations)
    return SearchResult(beta=best_beta, mask=best_mask, trace=trace,
                        fitness=float(best_fit), baseline_fitness=baseline)
