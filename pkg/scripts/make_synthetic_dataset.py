"""Write a small synthetic image set plus manifest for smoke-testing the pipeline."""

import argparse

from disaster_vsa.manifest import TASK_IDS, builtin_task_spec
from disaster_vsa.synthetic import write_multi_label_images, write_single_label_images


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--task", choices=TASK_IDS, default="task1")
    ap.add_argument("--per-class", type=int, default=10, help="images per label (task1)")
    ap.add_argument("--n-images", type=int, default=40, help="total images (task2/task3)")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = builtin_task_spec(args.task)
    if spec.is_multi_label:
        path = write_multi_label_images(args.out_dir, spec, args.n_images, size=args.size, seed=args.seed)
    else:
        path = write_single_label_images(args.out_dir, spec, args.per_class, size=args.size, seed=args.seed)
    print(path)


if __name__ == "__main__":
    main()
