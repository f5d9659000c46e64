"""Command-line interface.

Subcommands: ``prune``, ``sweep``, ``search-beta``, ``eval``,
``diagnostics``, ``export-mask``. All take a JSON config file plus a few
overriding flags; artifacts land in the config's output directory.

Exit codes: 0 success, 2 infeasible constraint, 3 numerical divergence,
4 malformed file or config.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import compensation, engine, pipeline, pruners
from .bundle import load_dataset, load_model, sample_batch
from .cost import ConstraintSpec
from .errors import (DivergenceError, FormatError, InfeasibleConstraintError,
                     PrunekitError)
from .metrics import compute_metrics

EXIT_INFEASIBLE = 2
EXIT_DIVERGENCE = 3
EXIT_FORMAT = 4


def _load_config(args) -> pipeline.PipelineConfig:
    path = Path(args.config)
    try:
        obj = json.loads(path.read_text())
    except OSError as e:
        raise FormatError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise FormatError(f"config {path} is not valid JSON: {e}")
    cfg = pipeline.PipelineConfig.from_json(obj)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    return cfg, obj


def cmd_prune(args):
    cfg, _ = _load_config(args)
    result = pipeline.run_pipeline(cfg)
    last = result.points[-1]
    print(json.dumps({
        "out_dir": str(result.out_dir),
        "achieved_macs": last.achieved_macs,
        "achieved_params": last.achieved_params,
        "post_accuracy": last.post_accuracy,
    }, indent=2))
    return 0


def cmd_sweep(args):
    cfg, obj = _load_config(args)
    for key in ("levels", "policies", "seeds"):
        if key not in obj:
            raise FormatError(f"sweep config is missing '{key}'")
    cells = pipeline.sweep(cfg, obj["levels"], obj["policies"], obj["seeds"],
                           workers=args.workers)
    failed = sum(1 for c in cells if c.error is not None)
    print(f"sweep: {len(cells)} cells, {failed} failed -> "
          f"{Path(cfg.out_dir) / 'sweep.csv'}")
    return 0


def cmd_search_beta(args):
    cfg, _ = _load_config(args)
    graph = load_model(cfg.model)
    train = load_dataset(cfg.train_data)
    spec = cfg.constraint.resolve(graph)
    rng = np.random.default_rng(cfg.seed)
    gradients = None
    if cfg.metric == "taylor1":
        batch = sample_batch(train, cfg.metric_batch_size, rng)
        _, gradients = engine.backward(graph, batch)
    metrics = compute_metrics(graph, cfg.metric, gradients)
    ea = replace(cfg.ea, seed=cfg.seed)
    result = compensation.search_beta(graph, metrics, spec, cfg.floor, ea,
                                      dataset=train)
    out = Path(cfg.out_dir)
    pipeline.write_json(pipeline.beta_to_json(result, cfg.metric, ea),
                        out / "beta.json")
    pipeline.write_json(pipeline.mask_to_json(graph, result.mask, spec),
                        out / "mask.json")
    (out / "trace.csv").write_text(pipeline.trace_csv(result.trace))
    print(json.dumps({"fitness": result.fitness,
                      "baseline_fitness": result.baseline_fitness,
                      "out_dir": str(out)}, indent=2))
    return 0


def cmd_eval(args):
    graph = load_model(args.model)
    dataset = load_dataset(args.data)
    z = pipeline.load_mask(args.mask) if args.mask else None
    report = pipeline.evaluate_model(graph, dataset, z)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_diagnostics(args):
    graph = load_model(args.model)
    dataset = load_dataset(args.data)
    rng = np.random.default_rng(args.seed or 0)
    batch = sample_batch(dataset, args.batch_size, rng)
    rows = pipeline.diagnostics_rows(graph, batch, args.metric)
    text = pipeline.diagnostics_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_mask(args):
    cfg, _ = _load_config(args)
    graph = load_model(cfg.model)
    spec = cfg.constraint.resolve(graph)
    gradients = None
    if cfg.metric == "taylor1":
        train = load_dataset(cfg.train_data)
        rng = np.random.default_rng(cfg.seed)
        batch = sample_batch(train, cfg.metric_batch_size, rng)
        _, gradients = engine.backward(graph, batch)
    metrics = compute_metrics(graph, cfg.metric, gradients)
    if args.beta:
        try:
            beta = json.loads(Path(args.beta).read_text())["beta"]
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise FormatError(f"bad beta file {args.beta}: {e}")
        from .metrics import compensated_scores
        scores = compensated_scores(metrics, np.asarray(beta))
        z = pruners.naive_prune(graph, scores, spec, cfg.floor)
    elif cfg.policy == "uniform":
        kf = pruners.uniform_keep_fraction(graph, metrics, spec, cfg.floor)
        z = pruners.uniform_prune(graph, metrics, kf, cfg.floor)
    elif cfg.policy == "layer_schedule":
        z = pruners.layer_scheduled_prune(graph, metrics, cfg.layer_schedule,
                                          cfg.floor)
    else:
        z = pruners.naive_prune(graph, metrics.per_group, spec, cfg.floor)
    out = Path(cfg.out_dir)
    pipeline.write_json(pipeline.mask_to_json(graph, z, spec),
                        out / "mask.json")
    print(f"wrote {out / 'mask.json'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="prunekit",
        description="Budget-constrained filter pruning with learned "
                    "per-layer score offsets.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("prune", help="run the prune/tune/tighten pipeline")
    with_config(sp)
    sp.set_defaults(fn=cmd_prune)

    sp = sub.add_parser("sweep", help="cross-product of levels x policies x seeds")
    with_config(sp)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("search-beta", help="learn per-layer score offsets")
    with_config(sp)
    sp.set_defaults(fn=cmd_search_beta)

    sp = sub.add_parser("eval", help="loss/accuracy/cost report for a bundle")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mask", default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("diagnostics",
                        help="per-group metric vs measured loss delta CSV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--metric", default="l2sq")
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_diagnostics)

    sp = sub.add_parser("export-mask", help="compute and write a mask.json")
    with_config(sp)
    sp.add_argument("--beta", default=None,
                    help="beta.json whose offsets adjust the scores")
    sp.set_defaults(fn=cmd_export_mask)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InfeasibleConstraintError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except PrunekitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
