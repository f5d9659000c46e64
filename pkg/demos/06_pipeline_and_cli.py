"""One-shot prune/tune pipeline on a scratch bundle, plus the CLI surface.

Everything the library does is also reachable through the `prunekit`
command. This demo writes a config file and drives two subcommands the
same way a shell user would.
"""

import json
import tempfile
from pathlib import Path

from prunekit import save_dataset, save_model
from prunekit.cli import main
from prunekit.desknet import build_desk_net, make_desk_dataset

tmp = Path(tempfile.mkdtemp(prefix="prunekit_demo_"))
graph = build_desk_net(seed=0)
train, test = make_desk_dataset(seed=0, n_train=768, n_test=256)
save_model(graph, tmp / "model")
save_dataset(train, tmp / "train")
save_dataset(test, tmp / "test")

config = {
    "model": str(tmp / "model"),
    "train_data": str(tmp / "train"),
    "eval_data": str(tmp / "test"),
    "constraint": {"resource": "macs", "fraction": 0.6},
    "policy": "naive",
    "metric": "l2sq",
    "tune": {"epochs": 2, "learning_rate": 0.02, "lr_drop_epochs": [],
             "batch_size": 64},
    "seed": 0,
    "out_dir": str(tmp / "out"),
}
(tmp / "config.json").write_text(json.dumps(config, indent=2))

print("== prunekit prune ==")
main(["prune", "--config", str(tmp / "config.json")])

print("\n== prunekit eval (pruned bundle) ==")
main(["eval", "--model", str(tmp / "out" / "pruned_model"),
      "--data", str(tmp / "test")])

print("\nartifacts under", tmp / "out")
for p in sorted((tmp / "out").rglob("*")):
    if p.is_file():
        print("  ", p.relative_to(tmp))
