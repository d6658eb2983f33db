"""Train the toy backbone on a separable synthetic set and print the per-epoch log.

Sanity check for the training loop: with enough optimizer steps the
train weighted F1 should reach 1.0 and the loss should fall.
"""

import argparse
import json
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from disaster_vsa.config import default_config
from disaster_vsa.manifest import builtin_task_spec
from disaster_vsa.synthetic import write_single_label_images
from disaster_vsa.train import train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--per-class", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", help="run directory (default: a temp dir)")
    args = ap.parse_args()

    spec = builtin_task_spec("task1")
    root = Path(args.out or tempfile.mkdtemp(prefix="overfit-"))
    manifest = write_single_label_images(root / "data", spec, args.per_class, seed=args.data_seed)
    cfg = replace(
        default_config(spec, "toy", seed=args.seed),
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
    )
    started = time.perf_counter()
    art = train(cfg, manifest, None, root / "run")
    for entry in art.log:
        print(json.dumps(entry))
    print(f"train weighted F1 {art.train_report.weighted_f1:.3f} in {time.perf_counter() - started:.1f}s; run dir {root / 'run'}")


if __name__ == "__main__":
    main()
