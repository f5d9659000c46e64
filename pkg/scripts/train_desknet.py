#!/usr/bin/env python3
"""Train the reference desk net and refresh the bundled asset.

Usage: python scripts/train_desknet.py [--epochs N] [--out DIR]

The net, data, and schedule are fully seeded, so the shipped bundle is
reproducible bit for bit.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from prunekit import TuneConfig, engine, save_model
from prunekit.desknet import build_desk_net, make_desk_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--weight-decay", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1]
                                         / "src/prunekit/assets/desknet"))
    args = ap.parse_args()

    graph = build_desk_net(seed=args.seed)
    train, test = make_desk_dataset(seed=args.seed)
    cfg = TuneConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        lr_drop_factor=0.1,
        lr_drop_epochs=(int(args.epochs * 0.6), int(args.epochs * 0.85)),
        weight_decay=args.weight_decay,
        batch_size=64,
        seed=args.seed,
    )
    trained = engine.finetune(graph, train, cfg)
    train_loss, train_acc = engine.evaluate(trained, train)
    test_loss, test_acc = engine.evaluate(trained, test)
    print(f"train loss {train_loss:.4f} acc {train_acc:.4f}")
    print(f"test  loss {test_loss:.4f} acc {test_acc:.4f}")
    if train_acc < 0.90:
        raise SystemExit("training accuracy below 0.90, not shipping")
    out = save_model(trained, args.out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
