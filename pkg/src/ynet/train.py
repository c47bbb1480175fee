"""Training loops: segmentation fitting with early stopping, encoder pretraining."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import OnlineProbs, Sample, augment_online, to_batch
from .model import EncoderClassifier, SegmentationModel
from .optim import (
    DEFAULT_C_MAP,
    EarlyStopState,
    LossConfig,
    ScaledRMSProp,
    binary_cross_entropy,
    composite_loss,
    dice_coefficient,
    early_stop_check,
)
from .tensor import Tape, Tensor
from .weights_io import save_checkpoint

logger = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "train_loss", "train_dice", "val_dice", "lr", "stopped_flag")


class NumericError(RuntimeError):
    """Non-finite loss; carries what is needed to replay the failing batch."""

    def __init__(self, message: str, batch_index: int, seed: int, epoch: int = 0):
        super().__init__(f"{message} (epoch {epoch}, batch {batch_index}, replay seed {seed})")
        self.batch_index = batch_index
        self.seed = seed
        self.epoch = epoch


def default_c_map(variant: str) -> dict[str, float]:
    """Per-group scales; a U-Net trained from scratch has no fine-tuned encoder."""
    c_map = dict(DEFAULT_C_MAP)
    if variant == "unet_scratch":
        c_map["encoder1"] = 1.0
    return c_map


def make_optimizer(model: SegmentationModel, eta: float = 1e-4, rho: float = 0.9, eps: float = 1e-8,
                   c_map: Optional[dict] = None) -> ScaledRMSProp:
    if c_map is None:
        c_map = default_c_map(model.config.variant)
    return ScaledRMSProp(model.parameters(), eta, rho, eps, c_map, model.group_of)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


@dataclass
class EpochStats:
    loss: float
    dice: float
    steps: int


def train_step(model: SegmentationModel, optimizer: ScaledRMSProp, x: np.ndarray, y: np.ndarray,
               loss_cfg: LossConfig = LossConfig()) -> tuple[float, float]:
    """One forward/backward/update on a batch; returns (loss, dice) before the update."""
    optimizer.zero_grad()
    with Tape() as tape:
        p = model.forward(Tensor(x), mode="train")
        loss = composite_loss(p, y, loss_cfg)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"loss is {value}")
    tape.backward(loss)
    optimizer.step()
    return value, dice_coefficient(p.data, y, loss_cfg.epsilon)


def train_epoch(
    model: SegmentationModel,
    samples: Sequence[Sample],
    optimizer: ScaledRMSProp,
    loss_cfg: LossConfig = LossConfig(),
    batch_size: int = 3,
    seed: int = 0,
    epoch: int = 0,
    augment: OnlineProbs = OnlineProbs(),
) -> EpochStats:
    """Shuffle (seeded by ``seed`` and ``epoch``), augment online and step once per batch."""
    if not samples:
        raise ValueError("train_epoch needs a non-empty dataset")
    rng = _epoch_rng(seed, epoch)
    order = rng.permutation(len(samples))
    losses, dices = [], []
    for b, start in enumerate(range(0, len(order), batch_size)):
        batch = [augment_online(samples[i], rng, augment) for i in order[start:start + batch_size]]
        x, y = to_batch(batch)
        try:
            loss, dice = train_step(model, optimizer, x, y, loss_cfg)
        except (FloatingPointError, ValueError) as exc:
            raise NumericError(str(exc), b, seed, epoch) from exc
        losses.append(loss)
        dices.append(dice)
    return EpochStats(float(np.mean(losses)), float(np.mean(dices)), len(losses))


def evaluate_dice(model: SegmentationModel, samples: Sequence[Sample], batch_size: int = 8,
                  epsilon: float = 1.0) -> float:
    """Mean per-frame dice of the raw probability maps (infer mode)."""
    if not samples:
        return 0.0
    x, y = to_batch(samples)
    pred = model.predict(x, batch_size)
    return float(np.mean([dice_coefficient(p, g[0], epsilon) for p, g in zip(pred, y)]))


@dataclass
class FitResult:
    rows: list[dict] = field(default_factory=list)
    best_val_dice: float = float("-inf")
    best_epoch: int = 0
    stopped_early: bool = False


def fit(
    model: SegmentationModel,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    optimizer: ScaledRMSProp,
    loss_cfg: LossConfig = LossConfig(),
    batch_size: int = 3,
    max_epochs: int = 30,
    patience: int = 10,
    min_delta: float = 1e-4,
    seed: int = 0,
    augment: OnlineProbs = OnlineProbs(),
    out_dir: Union[str, Path, None] = None,
) -> FitResult:
    """Epoch loop with early stopping on validation dice.

    With ``out_dir`` set, writes ``train_log.csv``, ``best.ynw`` and
    ``final.ynw``; ``max_epochs=0`` writes the initial weights as both.
    On an early stop the model ends with the best snapshot's weights.
    """
    out = Path(out_dir) if out_dir is not None else None
    stop = EarlyStopState(patience=patience, min_delta=min_delta)
    result = FitResult()
    optimizer.log_effective_lr()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "best.ynw")
    for epoch in range(1, max_epochs + 1):
        stats = train_epoch(model, train_samples, optimizer, loss_cfg, batch_size, seed, epoch, augment)
        val = evaluate_dice(model, val_samples, epsilon=loss_cfg.epsilon)
        improved_before = stop.best
        decision = early_stop_check(stop, min(max(val, 0.0), 1.0), model)
        row = {
            "epoch": epoch,
            "train_loss": f"{stats.loss:.6f}",
            "train_dice": f"{stats.dice:.6f}",
            "val_dice": f"{val:.6f}",
            "lr": f"{optimizer.state.eta:g}",
            "stopped_flag": int(decision == "stop"),
        }
        result.rows.append(row)
        logger.info("epoch %d loss %.4f dice %.4f val_dice %.4f", epoch, stats.loss, stats.dice, val)
        if out is not None and stop.best > improved_before:
            save_checkpoint(model, out / "best.ynw")
        if decision == "stop":
            result.stopped_early = True
            break
    result.best_val_dice = stop.best
    result.best_epoch = stop.best_epoch
    if out is not None:
        save_checkpoint(model, out / "final.ynw")
        write_csv(out / "train_log.csv", result.rows)
    return result


def write_csv(path: Union[str, Path], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# proxy pretraining of encoder one
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def classifier_accuracy(clf: EncoderClassifier, x: np.ndarray, labels: np.ndarray, batch_size: int = 16) -> float:
    hits = 0
    for start in range(0, len(x), batch_size):
        p = clf(Tensor(x[start:start + batch_size])).data[:, 0]
        hits += int(((p > 0.5) == (labels[start:start + batch_size] > 0.5)).sum())
    return hits / max(len(x), 1)


def pretrain_encoder(
    clf: EncoderClassifier,
    samples: Sequence[Sample],
    epochs: int = 20,
    batch_size: int = 8,
    eta: float = 3e-4,
    seed: int = 0,
    target_accuracy: Optional[float] = None,
) -> PretrainResult:
    """Train the classifier on polyp present/absent with plain RMSProp.

    Stops once an epoch's train accuracy reaches ``target_accuracy``. The
    weights of the most accurate epoch (the later one on a tie) are restored
    at the end.
    """
    x, _ = to_batch(samples)
    labels = np.array([1.0 if s.has_polyp else 0.0 for s in samples], dtype=np.float32)
    params = clf.parameters()
    opt = ScaledRMSProp(params, eta=eta, c_map={"all": 1.0}, group_of=lambda name: "all")
    result = PretrainResult()
    best_acc, best = -1.0, None
    for epoch in range(1, epochs + 1):
        order = _epoch_rng(seed, epoch).permutation(len(x))
        losses = []
        for b, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                p = clf(Tensor(x[idx]))
                loss = binary_cross_entropy(p, labels[idx][:, None])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"pretraining loss is {value}", b, seed, epoch)
            tape.backward(loss)
            opt.step()
            losses.append(value)
        acc = classifier_accuracy(clf, x, labels)
        result.losses.append(float(np.mean(losses)))
        result.accuracies.append(acc)
        logger.info("pretrain epoch %d loss %.4f accuracy %.3f", epoch, result.losses[-1], acc)
        if acc >= best_acc:
            best_acc, best = acc, {k: t.data.copy() for k, t in params.items()}
        if target_accuracy is not None and acc >= target_accuracy:
            break
    if best is not None:
        for k, t in params.items():
            t.data = best[k]
    return result
