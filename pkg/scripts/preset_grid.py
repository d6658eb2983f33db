"""Emit the six run configurations (two backbones x three tasks) and the commands to train them.

Configs are written under <workspace>/run/<preset>-<task>/config.json.
Actual training needs the real image manifests and pretrained weights.
"""

import argparse
from pathlib import Path

from disaster_vsa.config import PRESETS, preset_config
from disaster_vsa.manifest import TASK_IDS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workspace", default=".")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--task3-label", default=None, help="name of the 11th task3 label")
    args = ap.parse_args()

    ws = Path(args.workspace)
    for preset in sorted(PRESETS):
        for task_id in TASK_IDS:
            cfg = preset_config(preset, task_id, args.seed, args.task3_label)
            path = ws / "run" / f"{preset}-{task_id}" / "config.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            cfg.save(path)
            print(f"disaster-vsa --workspace {ws} train --config {path} --task {task_id} "
                  f"--train-manifest <{task_id}-train.csv> --dev-manifest <{task_id}-dev.csv> "
                  f"--name {preset}-{task_id}")


if __name__ == "__main__":
    main()
