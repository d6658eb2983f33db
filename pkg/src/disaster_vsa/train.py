"""Fine-tuning loop, run directories and self-describing checkpoints.

Pipeline order: load -> balance (train split only) -> augment -> train.
"""

from __future__ import annotations

import json
import logging
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from . import __version__
from .augment import apply_transforms, augment_dataset, load_image
from .balance import balance_dataset
from .config import TrainConfig, derive_seed, make_run_pair  # noqa: F401  (re-exported)
from .evaluate import MetricsReport, predictions_from_scores, weighted_f1
from .manifest import Dataset, TaskSpec, load_manifest, write_manifest
from .model import BACKBONES, ModelConfig, TransferModel, activate, build_model, loss, trainable_parameters

log = logging.getLogger(__name__)

CHECKPOINT_SUFFIX = ".pt"


class TrainingError(RuntimeError):
    pass


class CheckpointWriteError(TrainingError):
    pass


class ImageDecodeError(RuntimeError):
    pass


class ImageRecordDataset(torch.utils.data.Dataset):
    """Decodes, augments, resizes and normalizes records on access."""

    def __init__(self, ds: Dataset, input_size: int, mean: Sequence[float], std: Sequence[float]) -> None:
        self.records = ds.records
        self.spec = ds.spec
        self.input_size = input_size
        self.mean = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
        self.std = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)

    def __len__(self) -> int:
        return len(self.records)

    def target(self, idx: int) -> torch.Tensor:
        rec = self.records[idx]
        return torch.tensor([float(label in rec.labels) for label in self.spec.labels])

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
        rec = self.records[idx]
        try:
            img = load_image(rec.image_path)
        except OSError as exc:
            raise ImageDecodeError(f"cannot decode {rec.image_path}: {exc}") from exc
        img = apply_transforms(img, rec.transforms)
        x = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).unsqueeze(0)
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(
                x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False, antialias=True
            )
        x = (x.squeeze(0).clamp(0.0, 1.0) - self.mean) / self.std
        return x, self.target(idx)


def stratified_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded split of ``ds`` into (train, dev).

    Records are grouped by their first label in vocabulary order; each group
    contributes ``round(fraction * size)`` records to dev but always keeps at
    least one record in train.
    """
    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(ds.records):
        key = next(label for label in ds.spec.labels if label in rec.labels)
        groups.setdefault(key, []).append(i)
    dev_idx: set[int] = set()
    for label in ds.spec.labels:
        members = groups.get(label, [])
        n_dev = min(int(round(fraction * len(members))), len(members) - 1)
        if n_dev > 0:
            dev_idx.update(int(i) for i in rng.choice(members, size=n_dev, replace=False))
    train = [rec for i, rec in enumerate(ds.records) if i not in dev_idx]
    dev = [rec for i, rec in enumerate(ds.records) if i in dev_idx]
    return replace(ds, records=tuple(train), split="train"), replace(ds, records=tuple(dev), split="dev")


@contextmanager
def deterministic_mode(enabled: bool):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _loader(ds: ImageRecordDataset, batch_size: int, shuffle: bool = False, seed: int = 0, drop_last: bool = False):
    generator = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(ds, batch_size=batch_size, shuffle=shuffle, generator=generator, drop_last=drop_last)


@torch.no_grad()
def predict_scores(model: TransferModel, data: ImageRecordDataset, batch_size: int) -> np.ndarray:
    model.eval()
    out = [activate(model.cfg.head_mode, model(x)).numpy() for x, _ in _loader(data, batch_size)]
    if not out:
        return np.zeros((0, model.cfg.num_outputs), dtype=np.float32)
    return np.concatenate(out)


@torch.no_grad()
def evaluate_model(
    model: TransferModel, ds: Dataset, data: ImageRecordDataset, threshold: float, batch_size: int
) -> tuple[float, MetricsReport, np.ndarray]:
    """Mean loss, weighted-F1 report and raw scores of ``model`` on ``ds``."""
    model.eval()
    total, n, chunks = 0.0, 0, []
    for x, y in _loader(data, batch_size):
        logits = model(x)
        total += loss(model.cfg.head_mode, logits, y).item() * len(x)
        n += len(x)
        chunks.append(activate(model.cfg.head_mode, logits).numpy())
    scores = np.concatenate(chunks) if chunks else np.zeros((0, model.cfg.num_outputs), np.float32)
    preds = predictions_from_scores([r.image_path for r in ds.records], scores.tolist(), ds.spec, threshold)
    return total / max(n, 1), weighted_f1(ds, preds, threshold), scores


def checkpoint_metadata(cfg: TrainConfig, epoch: int, **extra: Any) -> dict[str, Any]:
    info = cfg.model.info
    meta = {
        "format_version": 1,
        "package_version": __version__,
        "backbone": cfg.model.backbone,
        "head_mode": cfg.model.head_mode,
        "num_outputs": cfg.model.num_outputs,
        "head_hidden_units": cfg.model.head_hidden_units,
        "task": cfg.task.to_dict(),
        "labels": list(cfg.task.labels),
        "input_size": info.input_size,
        "normalization": {"mean": list(info.mean), "std": list(info.std)},
        "threshold": cfg.threshold,
        "batch_size": cfg.batch_size,
        "optimizer": {"name": cfg.optimizer, "lr": cfg.learning_rate, "betas": list(cfg.adam_betas), "eps": cfg.adam_eps},
        "config_hash": cfg.config_hash(),
        "epoch": epoch,
    }
    meta.update(extra)
    return meta


def _write_with_retry(write, path: Path, attempts: int = 2) -> None:
    tmp = path.with_name(path.name + ".tmp")
    for attempt in range(1, attempts + 1):
        try:
            write(tmp)
            os.replace(tmp, path)
            return
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            if attempt == attempts:
                raise CheckpointWriteError(f"could not write {path} after {attempts} attempts: {exc}") from exc
            log.warning("write of %s failed (%s); retrying", path, exc)


def save_checkpoint(model: TransferModel, meta: dict[str, Any], path: str | os.PathLike) -> Path:
    """Write ``<stem>.pt`` weights plus a ``<stem>.json`` metadata sidecar."""
    path = Path(path).with_suffix(CHECKPOINT_SUFFIX)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    _write_with_retry(lambda p: torch.save(state, p), path)
    text = json.dumps(meta, indent=2, sort_keys=True) + "\n"
    _write_with_retry(lambda p: p.write_text(text, encoding="utf-8"), path.with_suffix(".json"))
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[TransferModel, dict[str, Any]]:
    """Rebuild a model from a checkpoint using only its sidecar metadata."""
    path = Path(path)
    weights, sidecar = path.with_suffix(CHECKPOINT_SUFFIX), path.with_suffix(".json")
    if not weights.is_file() or not sidecar.is_file():
        raise FileNotFoundError(f"checkpoint needs both {weights} and {sidecar}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    cfg = ModelConfig(
        backbone=meta["backbone"],
        pretrained=False,
        head_mode=meta["head_mode"],
        num_outputs=meta["num_outputs"],
        head_hidden_units=meta["head_hidden_units"],
    )
    model = build_model(cfg)
    model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    model.eval()
    return model, meta


def checkpoint_task(meta: dict[str, Any]) -> TaskSpec:
    return TaskSpec.from_dict(meta["task"])


def dataset_for(ds: Dataset, meta_or_backbone: dict[str, Any] | str) -> ImageRecordDataset:
    if isinstance(meta_or_backbone, str):
        info = BACKBONES[meta_or_backbone]
        return ImageRecordDataset(ds, info.input_size, info.mean, info.std)
    norm = meta_or_backbone["normalization"]
    return ImageRecordDataset(ds, meta_or_backbone["input_size"], norm["mean"], norm["std"])


@dataclass
class PreparedData:
    loaded: Dataset
    train: Dataset
    dev: Dataset | None
    balanced: Dataset
    augmented: Dataset
    skipped: list = field(default_factory=list)


def prepare_datasets(
    cfg: TrainConfig, train_manifest: str | os.PathLike, dev_manifest: str | os.PathLike | None = None,
    verify_images: bool = True,
) -> PreparedData:
    """Load, split, balance and augment; dev records are never touched by the last two."""
    loaded = load_manifest(train_manifest, cfg.task, "train")
    dev = None
    train_ds = loaded
    if dev_manifest is not None:
        dev = load_manifest(dev_manifest, cfg.task, "dev")
    elif cfg.dev_fraction > 0:
        train_ds, dev = stratified_split(loaded, cfg.dev_fraction, derive_seed(cfg.seed, "split"))
    balanced = balance_dataset(train_ds, cfg.balance)
    report = augment_dataset(balanced, cfg.augment, verify_images=verify_images)
    augmented = report.dataset
    if report.skipped:
        bad = {s.image_path for s in report.skipped}
        warnings.warn(f"dropping {len(bad)} unreadable training image(s): {sorted(bad)}", stacklevel=2)
        augmented = augmented.with_records(r for r in augmented.records if r.image_path not in bad)
    return PreparedData(loaded, train_ds, dev, balanced, augmented, report.skipped)


@dataclass
class RunArtifacts:
    run_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    log: list[dict[str, Any]]
    best_epoch: int
    train_report: MetricsReport
    dev_report: MetricsReport | None = None


def _append_jsonl(path: Path, entry: dict[str, Any]) -> None:
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry) + "\n")


def train(
    cfg: TrainConfig,
    train_manifest: str | os.PathLike,
    dev_manifest: str | os.PathLike | None = None,
    run_dir: str | os.PathLike = "run/default",
) -> RunArtifacts:
    """Fine-tune ``cfg.model`` for ``cfg.epochs`` epochs and write a run directory.

    The best checkpoint is the epoch with the highest dev weighted F1 (the
    earliest on ties); with no dev data it is the final epoch. In
    deterministic mode ``wall_clock_seconds`` is written as null in the log
    and kept in ``timing.jsonl`` so identical runs give identical logs.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    data = prepare_datasets(cfg, train_manifest, dev_manifest)
    if dev_manifest is None and data.dev is not None:
        write_manifest(data.train, run_dir / "train_split.csv")
        write_manifest(data.dev, run_dir / "dev_split.csv")
    if not data.augmented.records:
        raise TrainingError("training set is empty")

    log_path = run_dir / "log.jsonl"
    timing_path = run_dir / "timing.jsonl"
    for p in (log_path, timing_path):
        p.unlink(missing_ok=True)

    backbone = cfg.model.backbone
    train_data = dataset_for(data.augmented, backbone)
    dev_data = dataset_for(data.dev, backbone) if data.dev is not None and data.dev.records else None
    n = len(train_data)
    # a trailing batch of one breaks batch-norm in train mode
    drop_last = n > cfg.batch_size and n % cfg.batch_size == 1

    entries: list[dict[str, Any]] = []
    best_f1, best_epoch, dev_report = -1.0, 0, None
    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        model = build_model(cfg.model)
        params = trainable_parameters(model, cfg.model.freeze_backbone)
        optim = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)
        torch.manual_seed(derive_seed(cfg.seed, "dropout"))
        loader = _loader(train_data, cfg.batch_size, shuffle=True, seed=derive_seed(cfg.seed, "shuffle"),
                         drop_last=drop_last)

        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            model.train()
            total, seen = 0.0, 0
            for batch_no, (x, y) in enumerate(loader, start=1):
                optim.zero_grad(set_to_none=True)
                batch_loss = loss(cfg.model.head_mode, model(x), y)
                if not torch.isfinite(batch_loss):
                    raise TrainingError(f"non-finite loss {batch_loss.item()} at epoch {epoch}, batch {batch_no}")
                batch_loss.backward()
                optim.step()
                total += batch_loss.item() * len(x)
                seen += len(x)
            entry: dict[str, Any] = {"epoch": epoch, "train_loss": total / seen}
            if dev_data is not None:
                dev_loss, report, _ = evaluate_model(model, data.dev, dev_data, cfg.threshold, cfg.batch_size)
                entry["dev_loss"] = dev_loss
                entry["dev_weighted_f1"] = report.weighted_f1
                if report.weighted_f1 > best_f1:
                    best_f1, best_epoch, dev_report = report.weighted_f1, epoch, report
                    save_checkpoint(model, checkpoint_metadata(cfg, epoch, selection="dev_weighted_f1",
                                                               dev_weighted_f1=best_f1), run_dir / "ckpt-best")
            elapsed = time.perf_counter() - started
            entry["wall_clock_seconds"] = None if cfg.deterministic else elapsed
            _append_jsonl(log_path, entry)
            _append_jsonl(timing_path, {"epoch": epoch, "wall_clock_seconds": elapsed})
            entries.append(entry)
            log.info("epoch %d/%d %s", epoch, cfg.epochs, {k: v for k, v in entry.items() if k != "epoch"})

        final = save_checkpoint(model, checkpoint_metadata(cfg, cfg.epochs, selection="final"), run_dir / "ckpt-final")
        if dev_data is None:
            best_epoch = cfg.epochs
            save_checkpoint(model, checkpoint_metadata(cfg, cfg.epochs, selection="final"), run_dir / "ckpt-best")
        original_train = dataset_for(data.train, backbone)
        _, train_report, _ = evaluate_model(model, data.train, original_train, cfg.threshold, cfg.batch_size)

    train_report.save(run_dir / "train_metrics.json")
    if dev_report is not None:
        dev_report.save(run_dir / "dev_metrics.json")
    meta = {
        "package_version": __version__,
        "torch_version": torch.__version__,
        "config_hash": cfg.config_hash(),
        "best_epoch": best_epoch,
        "best_dev_weighted_f1": best_f1 if dev_data is not None else None,
        "final_train_weighted_f1": train_report.weighted_f1,
        "record_counts": {
            "loaded": len(data.loaded),
            "train": len(data.train),
            "dev": len(data.dev) if data.dev is not None else 0,
            "balanced": len(data.balanced),
            "augmented": len(data.augmented),
        },
        "skipped_images": [s.image_path for s in data.skipped],
    }
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunArtifacts(
        run_dir=run_dir,
        final_checkpoint=final,
        best_checkpoint=(run_dir / "ckpt-best").with_suffix(CHECKPOINT_SUFFIX),
        log_path=log_path,
        log=entries,
        best_epoch=best_epoch,
        train_report=train_report,
        dev_report=dev_report,
    )
