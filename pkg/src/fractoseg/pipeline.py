"""Training loop and whole-image prediction."""
from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig
from .dataset import TileSet, pad_to_multiple, to_input
from .optim import VOID, Adam, cross_entropy_loss, pixel_accuracy
from .unet import UNetModel, save_weights

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


def deterministic_mode(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "val_loss": self.val_loss,
            "val_acc": self.val_acc,
        })


def train_step(model: UNetModel, opt: Adam, x: np.ndarray, target: np.ndarray, ignore_index=None):
    logits = model.forward(x)
    loss, grad = cross_entropy_loss(logits, target, ignore_index)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    acc = pixel_accuracy(logits, target, ignore_index)
    grads = model.backward(grad)
    opt.step(model.params, grads, model.frozen)
    return loss, float(acc)


def evaluate_batches(model: UNetModel, batches, n: int, ignore_index=None):
    model.training = False
    losses, accs = [], []
    try:
        for _ in range(n):
            x, t = next(batches)
            logits = model.forward(x)
            loss, _ = cross_entropy_loss(logits, t, ignore_index)
            losses.append(loss)
            accs.append(float(pixel_accuracy(logits, t, ignore_index)))
    finally:
        model.training = True
    return float(np.mean(losses)), float(np.mean(accs))


def train(model: UNetModel, train_set: TileSet, val_set: TileSet | None, cfg: RunConfig,
          out_dir=None, on_epoch=None) -> list[EpochLog]:
    """Adam training; per-epoch mean losses/accuracies, best and final weights.

    Writes ``train_log.jsonl``, ``best.fseg`` (lowest validation loss, or
    training loss without a validation set) and ``final.fseg`` to `out_dir`.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ignore = VOID if cfg.void_policy == "ignore" else None
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.epsilon)
    batches = train_set.batches(cfg.batch_size, cfg.seed + 1, cfg.void_policy)
    val_batches = val_set.batches(cfg.batch_size, cfg.seed + 2, cfg.void_policy) if val_set else None
    history: list[EpochLog] = []
    best = math.inf
    step = 0
    with deterministic_mode(cfg.deterministic):
        for epoch in range(1, cfg.epochs + 1):
            losses, accs = [], []
            for _ in range(cfg.iters_per_epoch):
                step += 1
                x, t = next(batches)
                try:
                    loss, acc = train_step(model, opt, x, t, ignore)
                except FloatingPointError as exc:
                    raise NumericError(f"step {step} (epoch {epoch}): {exc}") from exc
                losses.append(loss)
                accs.append(acc)
            val_loss = val_acc = None
            if val_batches is not None and cfg.val_iters > 0:
                val_loss, val_acc = evaluate_batches(model, val_batches, cfg.val_iters, ignore)
            entry = EpochLog(epoch, float(np.mean(losses)), float(np.mean(accs)), val_loss, val_acc)
            history.append(entry)
            log.info(entry.to_json())
            if on_epoch is not None:
                on_epoch(entry)
            if out is not None:
                with open(out / "train_log.jsonl", "a") as fh:
                    fh.write(entry.to_json() + "\n")
                score = val_loss if val_loss is not None else entry.train_loss
                if score < best:
                    best = score
                    save_weights(model, out / "best.fseg")
    if out is not None:
        save_weights(model, out / "final.fseg")
    return history


def predict_logits(model: UNetModel, image: np.ndarray) -> np.ndarray:
    """Logits (1, K, H, W) for a uint8 image of any size.

    Sizes not divisible by 2^stages are reflect-padded and the logits cropped back.
    """
    h, w = image.shape
    padded = pad_to_multiple(image, model.config.divisor, mode="reflect")
    was_training = model.training
    model.training = False
    try:
        logits = model.forward(to_input(padded[None]))
    finally:
        model.training = was_training
    return logits[:, :, :h, :w]
