"""End-to-end prune/tune/tighten runs, constraint sweeps, and reports.

A pipeline run walks a tightening schedule: at each step it scores the
current weights, produces a mask with the configured policy, physically
prunes, fine-tunes, and records a Pareto point. The default schedule is
one-shot (a single step at the final budget).

Every artifact (masks, offsets, traces, CSVs, reports) is written
deterministically: identical config and seed reproduce byte-identical
files. Wall-clock measurements are segregated into a separate timing CSV
so the main outputs stay comparable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import compensation, engine, pruners
from .bundle import Dataset, load_dataset, load_model, sample_batch, save_model
from .compensation import EAConfig, SearchResult
from .cost import ConstraintSpec, cost, macs, params, satisfies
from .engine import TuneConfig
from .errors import FormatError, PrunekitError
from .metrics import METRIC_KINDS, compute_metrics
from .model import NetworkGraph, apply_mask, full_mask
from .pruners import FloorPolicy

POLICIES = ("uniform", "naive", "lcp", "single_filter", "layer_schedule")

SWEEP_SCHEMA = 1
PARETO_SCHEMA = 1


@dataclass(frozen=True)
class PipelineConfig:
    model: str
    train_data: str
    eval_data: str
    constraint: ConstraintSpec
    policy: str = "naive"
    metric: str = "l2sq"
    schedule: tuple[float, ...] | None = None  # fractions or absolute counts
    floor: FloorPolicy = FloorPolicy()
    tune: TuneConfig = TuneConfig()
    ea: EAConfig = EAConfig()
    layer_schedule: tuple[int, ...] | None = None
    tune_interval: int | None = None
    sf_tune: TuneConfig = TuneConfig(epochs=1)
    metric_batch_size: int = 512
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise FormatError(f"unknown policy '{self.policy}'")
        if self.metric not in METRIC_KINDS:
            raise FormatError(f"unknown metric '{self.metric}'")

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise FormatError("config must be a JSON object")
        known = {
            "model", "train_data", "eval_data", "constraint", "policy",
            "metric", "schedule", "floor_fraction", "tune", "ea",
            "layer_schedule", "tune_interval", "sf_tune", "metric_batch_size",
            "seed", "out_dir", "levels", "policies", "seeds", "workers",
        }
        unknown = set(obj) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        for key in ("model", "train_data", "eval_data", "constraint"):
            if key not in obj:
                raise FormatError(f"config is missing '{key}'")
        try:
            kwargs = dict(
                model=obj["model"],
                train_data=obj["train_data"],
                eval_data=obj["eval_data"],
                constraint=ConstraintSpec(**obj["constraint"]),
            )
            if "floor_fraction" in obj:
                kwargs["floor"] = FloorPolicy(obj["floor_fraction"])
            if "tune" in obj:
                kwargs["tune"] = TuneConfig(**obj["tune"])
            if "sf_tune" in obj:
                kwargs["sf_tune"] = TuneConfig(**obj["sf_tune"])
            if "ea" in obj:
                kwargs["ea"] = EAConfig(**obj["ea"])
            for key in ("policy", "metric", "tune_interval",
                        "metric_batch_size", "seed", "out_dir"):
                if key in obj:
                    kwargs[key] = obj[key]
            for key in ("schedule", "layer_schedule"):
                if key in obj and obj[key] is not None:
                    kwargs[key] = tuple(obj[key])
        except TypeError as e:
            raise FormatError(f"bad config field: {e}")
        return cls(**kwargs)


@dataclass
class ParetoPoint:
    """One prune+tune outcome at one budget."""

    requested: int
    resource: str
    policy: str
    seed: int
    pre_loss: float
    pre_accuracy: float
    post_loss: float
    post_accuracy: float
    achieved_macs: int
    achieved_params: int
    wall_seconds: float = field(default=0.0, compare=False)

    FIELDS = ("requested", "resource", "policy", "seed", "pre_loss",
              "pre_accuracy", "post_loss", "post_accuracy",
              "achieved_macs", "achieved_params")

    def row(self):
        return [_fmt(getattr(self, f)) for f in self.FIELDS]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _tag_step(e: PrunekitError, step: int):
    """Prefix the schedule step onto an in-flight error, keeping its type."""
    e.step = step
    if e.args:
        e.args = (f"step {step}: {e.args[0]}",) + e.args[1:]
    else:
        e.args = (f"step {step}",)


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# -- artifact writers ---------------------------------------------------------

def partition_hash(graph: NetworkGraph) -> str:
    enc = ";".join(",".join(str(j) for j in g)
                   for g in graph.filter_groups().groups)
    return hashlib.sha256(enc.encode()).hexdigest()


def mask_to_json(graph: NetworkGraph, z, spec: ConstraintSpec) -> dict:
    return {
        "format_version": 1,
        "num_filters": graph.K,
        "bits": [int(b) for b in np.asarray(z, dtype=bool)],
        "partition_sha256": partition_hash(graph),
        "constraint": spec.to_json(),
    }


def load_mask(path) -> np.ndarray:
    try:
        obj = json.loads(Path(path).read_text())
        bits = obj["bits"]
        n = obj["num_filters"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"bad mask file {path}: {e}")
    if len(bits) != n:
        raise FormatError(f"mask file {path}: {len(bits)} bits for num_filters={n}")
    return np.array(bits, dtype=bool)


def write_json(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def beta_to_json(result: SearchResult, metric: str, cfg: EAConfig) -> dict:
    return {
        "format_version": 1,
        "metric": metric,
        "beta": [float(b) for b in result.beta],
        "fitness": result.fitness,
        "baseline_fitness": result.baseline_fitness,
        "seed": cfg.seed,
        "initial_pool_fitness": [_inf_safe(f) for f in result.trace.initial_fitness],
        "mask_evaluations": result.trace.evaluations,
    }


def _inf_safe(f):
    return float(f) if np.isfinite(f) else None


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "fitness", "best", "alpha"])
    for i in range(len(trace)):
        w.writerow([int(trace.iteration[i]), _fmt(float(trace.fitness[i])),
                    _fmt(float(trace.best_so_far[i])), _fmt(float(trace.alpha[i]))])
    return buf.getvalue()


# -- policies ------------------------------------------------------------------

def make_mask(graph: NetworkGraph, train: Dataset, cfg: PipelineConfig,
              target: int, step_seed: int):
    """Run the configured policy; returns (mask, extras dict)."""
    spec = ConstraintSpec(resource=cfg.constraint.resource,
                          absolute=target).resolve(graph)
    rng = np.random.default_rng(step_seed)
    gradients = None
    if cfg.metric == "taylor1":
        batch = sample_batch(train, cfg.metric_batch_size, rng)
        _, gradients = engine.backward(graph, batch)
    metrics = compute_metrics(graph, cfg.metric, gradients)

    if cfg.policy == "uniform":
        kf = pruners.uniform_keep_fraction(graph, metrics, spec, cfg.floor)
        return pruners.uniform_prune(graph, metrics, kf, cfg.floor), {}
    if cfg.policy == "naive":
        return pruners.naive_prune(graph, metrics.per_group, spec, cfg.floor), {}
    if cfg.policy == "lcp":
        ea = replace(cfg.ea, seed=step_seed)
        result = compensation.search_beta(graph, metrics, spec, cfg.floor,
                                          ea, dataset=train)
        return result.mask, {"search": result, "ea": ea}
    if cfg.policy == "layer_schedule":
        if cfg.layer_schedule is None:
            raise FormatError("policy 'layer_schedule' needs a layer_schedule list")
        return pruners.layer_scheduled_prune(graph, metrics, cfg.layer_schedule,
                                             cfg.floor), {}
    if cfg.policy == "single_filter":
        res = pruners.single_filter_greedy(
            graph, train, spec, cfg.metric, tune_cfg=cfg.sf_tune,
            tune_interval=cfg.tune_interval, floor=cfg.floor,
            metric_batch_size=cfg.metric_batch_size, seed=step_seed,
            return_details=True)
        return res.mask, {"tuned_source": res.graph}
    raise FormatError(f"unknown policy '{cfg.policy}'")


# -- pipeline ------------------------------------------------------------------

@dataclass
class PipelineResult:
    graph: NetworkGraph
    points: list[ParetoPoint]
    out_dir: Path | None


def resolve_schedule(graph: NetworkGraph, cfg: PipelineConfig):
    """Absolute tightening targets, resolved once against the unpruned cost."""
    resource = cfg.constraint.resource
    full = cost(graph, None, resource).total
    final = cfg.constraint.resolve(graph).zeta
    if cfg.schedule is None:
        return [final]
    targets = []
    for t in cfg.schedule:
        if isinstance(t, float) and 0 < t <= 1:
            targets.append(int(np.floor(t * full)))
        else:
            targets.append(int(t))
    if targets[-1] != final:
        raise FormatError(
            f"schedule must end at the final budget {final}, got {targets[-1]}")
    if any(b >= a for a, b in zip(targets, targets[1:])):
        raise FormatError("schedule targets must be strictly decreasing")
    if any(not 0 < t <= full for t in targets):
        raise FormatError(f"schedule targets must lie in (0, {full}]")
    return targets


def run_pipeline(cfg: PipelineConfig, graph: NetworkGraph | None = None,
                 train: Dataset | None = None, test: Dataset | None = None,
                 write: bool = True) -> PipelineResult:
    """Prune, tune, and tighten per the config; optionally write artifacts."""
    graph = graph if graph is not None else load_model(cfg.model)
    train = train if train is not None else load_dataset(cfg.train_data)
    test = test if test is not None else load_dataset(cfg.eval_data)
    out = Path(cfg.out_dir) if write else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    targets = resolve_schedule(graph, cfg)
    current = graph
    points = []
    for step, target in enumerate(targets):
        t0 = time.perf_counter()
        step_seed = _derive_seed(cfg.seed, step)
        try:
            spec_now = ConstraintSpec(resource=cfg.constraint.resource,
                                      absolute=target)
            if cost(current, None, spec_now.resource).total <= target:
                z, extras = full_mask(current), {}
            else:
                z, extras = make_mask(current, train, cfg, target, step_seed)
                assert satisfies(current, z, spec_now.resolve(current))
        except PrunekitError as e:
            _tag_step(e, step)
            raise
        if out:
            write_json(mask_to_json(current, z, spec_now),
                       out / f"step{step}_mask.json")
            if "search" in extras:
                write_json(beta_to_json(extras["search"], cfg.metric, extras["ea"]),
                           out / f"step{step}_beta.json")
                (out / f"step{step}_trace.csv").write_text(
                    trace_csv(extras["search"].trace))

        source = extras.get("tuned_source", current)
        pruned = apply_mask(source, z)
        pre_loss, pre_acc = engine.evaluate(pruned, test)
        tune = replace(cfg.tune, seed=_derive_seed(cfg.seed, step, 1))
        try:
            tuned = engine.finetune(pruned, train, tune)
        except PrunekitError as e:
            _tag_step(e, step)
            raise
        post_loss, post_acc = engine.evaluate(tuned, test)
        points.append(ParetoPoint(
            requested=target,
            resource=cfg.constraint.resource,
            policy=cfg.policy,
            seed=cfg.seed,
            pre_loss=pre_loss,
            pre_accuracy=pre_acc,
            post_loss=post_loss,
            post_accuracy=post_acc,
            achieved_macs=macs(tuned).total,
            achieved_params=params(tuned).total,
            wall_seconds=time.perf_counter() - t0,
        ))
        current = tuned

    if out:
        save_model(current, out / "pruned_model")
        _write_pareto_csv(points, out / "pareto.csv")
        _write_timing_csv(points, out / "timing.csv")
        write_json({"points": [dict(zip(ParetoPoint.FIELDS, p.row()))
                               for p in points]}, out / "report.json")
    return PipelineResult(graph=current, points=points, out_dir=out)


def _write_pareto_csv(points, path: Path):
    with path.open("w", newline="") as fh:
        fh.write(f"# pareto_schema={PARETO_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step",) + ParetoPoint.FIELDS)
        for i, p in enumerate(points):
            w.writerow([str(i)] + p.row())


def _write_timing_csv(points, path: Path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "wall_seconds"])
        for i, p in enumerate(points):
            w.writerow([str(i), _fmt(p.wall_seconds)])


# -- sweeps --------------------------------------------------------------------

SWEEP_COLUMNS = ("row_type", "level", "policy", "seed", "requested",
                 "pre_loss", "pre_accuracy", "post_loss", "post_accuracy",
                 "achieved_macs", "achieved_params", "error")


@dataclass
class SweepCell:
    index: int
    level: float
    policy: str
    seed: int
    point: ParetoPoint | None = None
    error: str | None = None
    wall_seconds: float = 0.0


def _cell_config(cfg: PipelineConfig, cell_dir: Path, level, policy, seed):
    return replace(
        cfg,
        policy=policy,
        seed=seed,
        constraint=ConstraintSpec(resource=cfg.constraint.resource,
                                  fraction=level),
        schedule=None,
        out_dir=str(cell_dir),
    )


def _run_cell(args):
    cfg, index, level, policy, seed = args
    cell = SweepCell(index=index, level=level, policy=policy, seed=seed)
    t0 = time.perf_counter()
    try:
        result = run_pipeline(cfg)
        cell.point = result.points[-1]
    except PrunekitError as e:
        cell.error = f"{type(e).__name__}: {e}"
    cell.wall_seconds = time.perf_counter() - t0
    return cell


def sweep(cfg: PipelineConfig, levels, policies, seeds,
          workers: int = 1) -> list[SweepCell]:
    """Run the full (level x policy x seed) cross product and write CSVs.

    Failed cells become error rows; the sweep itself never aborts. Cells
    are independent (each gets its own derived seed and artifact
    directory), so they can run in parallel; output order is the input
    cross-product order either way.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    index = 0
    for level in levels:
        for policy in policies:
            for seed in seeds:
                cell_dir = out / "cells" / f"{index:03d}_{policy}_s{seed}"
                jobs.append((_cell_config(cfg, cell_dir, level, policy, seed),
                             index, level, policy, seed))
                index += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(job) for job in jobs]
    cells.sort(key=lambda c: c.index)
    _write_sweep_csv(cells, out / "sweep.csv")
    _write_sweep_timing(cells, out / "sweep_timing.csv")
    return cells


def _write_sweep_csv(cells, path: Path):
    with path.open("w", newline="") as fh:
        fh.write(f"# sweep_schema={SWEEP_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in cells:
            if c.error is not None:
                w.writerow(["error", _fmt(c.level), c.policy, str(c.seed),
                            "", "", "", "", "", "", "", c.error])
            else:
                p = c.point
                w.writerow(["data", _fmt(c.level), c.policy, str(c.seed),
                            str(p.requested), _fmt(p.pre_loss),
                            _fmt(p.pre_accuracy), _fmt(p.post_loss),
                            _fmt(p.post_accuracy), str(p.achieved_macs),
                            str(p.achieved_params), ""])
        # summary rows: mean/std over seeds per (level, policy), input order
        seen = []
        for c in cells:
            key = (c.level, c.policy)
            if key not in seen:
                seen.append(key)
        for level, policy in seen:
            group = [c.point for c in cells
                     if (c.level, c.policy) == (level, policy) and c.point]
            if not group:
                continue
            for row_type, agg in (("mean", np.mean), ("std", np.std)):
                w.writerow([
                    row_type, _fmt(level), policy, "", str(group[0].requested),
                    _fmt(float(agg([p.pre_loss for p in group]))),
                    _fmt(float(agg([p.pre_accuracy for p in group]))),
                    _fmt(float(agg([p.post_loss for p in group]))),
                    _fmt(float(agg([p.post_accuracy for p in group]))),
                    _fmt(float(agg([p.achieved_macs for p in group]))),
                    _fmt(float(agg([p.achieved_params for p in group]))), ""])


def _write_sweep_timing(cells, path: Path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "level", "policy", "seed", "wall_seconds"])
        for c in cells:
            w.writerow([str(c.index), _fmt(c.level), c.policy, str(c.seed),
                        _fmt(c.wall_seconds)])


# -- evaluation ----------------------------------------------------------------

def evaluate_model(graph: NetworkGraph, dataset: Dataset, z=None) -> dict:
    """Loss/accuracy/cost report, the payload of the CLI `eval` subcommand."""
    loss, acc = engine.evaluate(graph, dataset, z)
    return {
        "loss": loss,
        "accuracy": acc,
        "macs": macs(graph, z).to_json(),
        "params": params(graph, z).to_json(),
    }


def diagnostics_rows(graph: NetworkGraph, batch, metric_kind: str = "l2sq",
                     gradients=None):
    """(filter_id, layer_id, metric, measured loss delta) per filter group."""
    if metric_kind == "taylor1" and gradients is None:
        _, gradients = engine.backward(graph, batch)
    m = compute_metrics(graph, metric_kind, gradients)
    deltas = engine.single_filter_deltas(graph, batch)
    rows = []
    for gi, g in enumerate(m.groups):
        rep = g[0]
        lid = graph.prunable_ids[int(graph.filter_layer[rep])]
        rows.append((rep, lid, float(m.per_group[gi]), float(deltas[gi])))
    return rows


def diagnostics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["filter_id", "layer_id", "metric", "measured_delta"])
    for rep, lid, metric, delta in rows:
        w.writerow([str(rep), lid, _fmt(metric), _fmt(delta)])
    return buf.getvalue()
