"""Training and evaluation loops."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data
from .layers import Mode
from .metrics import ConfusionMatrix, accuracy, confusion_from_labels, macro_f1
from .model import FerModel, build_model, predict, save_checkpoint
from .optim import Adam, softmax_cross_entropy

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Loss or parameters became NaN/Inf."""


@dataclass
class TrainConfig:
    manifests: list[str] = field(default_factory=list)
    val_manifests: list[str] = field(default_factory=list)
    images_dir: str = "."
    epochs: int = 100
    batch_size: int = 512
    lr: float = 0.001
    weight_decay: float = 1e-6
    seed: int = 0
    checkpoint: str = "model.ckpt"
    out_dir: str | None = None
    log_interval: int = 0
    precision: str = "f32"
    threads: int = 1

    def __post_init__(self) -> None:
        for name in ("epochs", "batch_size", "lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float
    val_macro_f1: float


def best_checkpoint_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.best{p.suffix or '.ckpt'}")


def evaluate(model: FerModel, dataset: data.ImageDataset, batch_size: int = 256):
    """Infer-mode predictions over a dataset: (confusion matrix, preds, probs)."""
    preds, probs = predict(model, data.normalize(dataset.images, model.dtype), batch_size)
    return confusion_from_labels(dataset.labels, preds, model.config.n_classes), preds, probs


def _check_finite(model: FerModel, loss: float, epoch: int, batch: int) -> None:
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
    for name, p in model.parameters().items():
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"non-finite values in {name} after epoch {epoch}, batch {batch}")


def fit(
    model: FerModel,
    train_set: data.ImageDataset,
    val_set: data.ImageDataset | None,
    epochs: int,
    batch_size: int,
    lr: float = 0.001,
    weight_decay: float = 1e-6,
    seed: int = 0,
    checkpoint: str | os.PathLike | None = None,
    log_interval: int = 0,
    stop_when: Callable[[EpochRecord], bool] | None = None,
) -> list[EpochRecord]:
    """Run the training loop; returns one record per completed epoch.

    ``stop_when`` is checked after every epoch and ends training early when
    it returns true.
    """
    if len(train_set) < 2:
        raise data.DataError(f"training set needs >= 2 samples, has {len(train_set)}")
    opt = Adam(lr=lr, weight_decay=weight_decay)
    history: list[EpochRecord] = []
    best = -1.0
    for epoch in range(1, epochs + 1):
        total_loss, correct, seen = 0.0, 0, 0
        for b, batch in enumerate(data.batches(train_set, batch_size, seed, epoch, model.dtype), start=1):
            logits = model.forward_logits(batch.images, Mode.TRAIN)
            loss, grad = softmax_cross_entropy(logits, batch.labels)
            if not math.isfinite(loss):
                _check_finite(model, loss, epoch, b)
            model.backward(grad)
            opt.step(model.parameters(), model.gradients())
            _check_finite(model, loss, epoch, b)
            n = len(batch.labels)
            total_loss += loss * n
            correct += int((np.argmax(logits, axis=1) == batch.labels).sum())
            seen += n
            if log_interval and b % log_interval == 0:
                log.info("epoch %d batch %d loss=%.6f", epoch, b, loss)

        val_acc = val_f1 = float("nan")
        if val_set is not None and len(val_set):
            cm, _, _ = evaluate(model, val_set)
            val_acc, val_f1 = accuracy(cm), macro_f1(cm)
        rec = EpochRecord(epoch, total_loss / seen, correct / seen, val_acc, val_f1)
        history.append(rec)
        log.info(
            "epoch %d/%d loss=%.6f train_acc=%.4f val_acc=%.4f val_macro_f1=%.4f",
            epoch, epochs, rec.loss, rec.train_accuracy, rec.val_accuracy, rec.val_macro_f1,
        )
        if checkpoint is not None:
            meta = {"epoch": epoch, "seed": seed, "val_accuracy": val_acc}
            save_checkpoint(model, checkpoint, **meta)
            score = val_acc if not math.isnan(val_acc) else rec.train_accuracy
            if score > best:
                best = score
                save_checkpoint(model, best_checkpoint_path(checkpoint), **meta)
        if stop_when is not None and stop_when(rec):
            break
    return history


def _gather(manifests: Sequence[str]) -> list[data.ManifestEntry]:
    entries: list[data.ManifestEntry] = []
    for m in manifests:
        e, _ = data.load_manifest(m)
        entries += e
    return entries


def train(config: TrainConfig, stop_when: Callable[[EpochRecord], bool] | None = None):
    """Load data per ``config``, train, and write checkpoints and the log.

    Without ``val_manifests`` the merged manifests are split 80:20 by seed.
    Returns ``(model, history)``.
    """
    entries = _gather(config.manifests)
    if config.val_manifests:
        train_entries, val_entries = entries, _gather(config.val_manifests)
    else:
        train_entries, val_entries = data.split(entries, data.SplitConfig(0.8, config.seed))
    if len(train_entries) < 2 or len(val_entries) < 2:
        raise data.DataError(
            f"need >= 2 usable samples per split, got {len(train_entries)} train / {len(val_entries)} validation"
        )
    train_set = data.load_dataset(train_entries, config.images_dir, config.threads)
    val_set = data.load_dataset(val_entries, config.images_dir, config.threads)
    log.info("training on %d samples, validating on %d", len(train_set), len(val_set))

    ckpt = Path(config.checkpoint)
    if not ckpt.parent.exists() or not os.access(ckpt.parent, os.W_OK):
        raise OSError(f"checkpoint directory {ckpt.parent} is not writable")

    model = build_model(config.seed, dtype=config.dtype)
    history = fit(
        model, train_set, val_set, config.epochs, config.batch_size, config.lr,
        config.weight_decay, config.seed, ckpt, config.log_interval, stop_when,
    )
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history(out / "train_log.csv", history)
        from .plots import plot_training_curves
        plot_training_curves(history, out / "training_curves.png")
    return model, history


def write_history(path: str | os.PathLike, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_accuracy", "val_accuracy", "val_macro_f1"])
        for r in history:
            w.writerow([r.epoch, f"{r.loss:.8f}", f"{r.train_accuracy:.6f}",
                        f"{r.val_accuracy:.6f}", f"{r.val_macro_f1:.6f}"])


def write_predictions(path: str | os.PathLike, dataset: data.ImageDataset, preds, probs, names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "true", "pred", *(f"p_{n}" for n in names)])
        for p, t, k, row in zip(dataset.paths, dataset.labels, preds, probs):
            w.writerow([p, int(t), int(k), *(f"{v:.8f}" for v in row)])


def confusion_from_predictions_csv(path: str | os.PathLike, n_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix(n_classes)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cm.accumulate(int(row["true"]), int(row["pred"]))
    return cm
