"""Desk-scale experiments: overfitting one batch and the synthetic analogue."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from .config import ModelSettings, RunConfig
from .dataset import TileSet, to_input, training_target
from .metrics import evaluate_pair_set
from .optim import Adam, cross_entropy_loss, pixel_accuracy
from .pipeline import deterministic_mode, predict_logits, train
from .quantify import classify
from .synthetic import synthetic_dataset
from .unet import build


@dataclass
class OverfitResult:
    losses: list[float]
    accuracies: list[float]
    steps: int
    seconds: float
    model: object = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1]


def overfit_one_batch(steps: int = 500, lr: float = 1e-3, seed: int = 0, batch: int = 4, size: int = 64,
                      stages: int = 3, stop_loss: float | None = None, stop_acc: float | None = None) -> OverfitResult:
    """Train the desk U-net on one fixed synthetic batch.

    Each step records loss and accuracy of its forward pass. When both targets
    are met the loop stops before updating, so the returned model is exactly
    the one that was measured.
    """
    images, masks = synthetic_dataset(batch, seed=seed, size=size)
    x, t = to_input(images), training_target(masks)
    model = build(ModelSettings.preset("desk", stages).to_unet(), seed=seed)
    opt = Adam(lr=lr)
    losses, accs = [], []
    t0 = time.perf_counter()
    with deterministic_mode():
        for _ in range(steps):
            logits = model.forward(x)
            loss, grad = cross_entropy_loss(logits, t)
            acc = float(pixel_accuracy(logits, t))
            losses.append(loss)
            accs.append(acc)
            if stop_loss is not None and loss < stop_loss and acc > stop_acc:
                break
            opt.step(model.params, model.backward(grad), model.frozen)
    return OverfitResult(losses, accs, len(losses), time.perf_counter() - t0, model)


@dataclass
class AnalogueResult:
    report: object
    history: list = field(default_factory=list)
    seconds: float = 0.0
    model: object = None


def synthetic_config(epochs: int = 10, seed: int = 0, n_train: int = 160, batch_size: int = 4,
                     lr: float = 1e-3) -> RunConfig:
    cfg = RunConfig(
        model=ModelSettings.preset("desk", 3),
        lr=lr,
        batch_size=batch_size,
        epochs=epochs,
        iters_per_epoch=max(1, n_train // batch_size),
        val_iters=0,
        seed=seed,
        tile_size=64,
    )
    return cfg.validate()


def synthetic_analogue(n_tiles: int = 200, n_test: int = 40, epochs: int = 10, seed: int = 0,
                       lr: float = 1e-3, out_dir=None) -> AnalogueResult:
    """Train the desk U-net on synthetic tiles and evaluate on held-out ones."""
    images, masks = synthetic_dataset(n_tiles, seed=seed)
    n_train = n_tiles - n_test
    train_set = TileSet(images[:n_train], masks[:n_train])
    cfg = synthetic_config(epochs, seed, n_train, lr=lr)
    model = build(cfg.model.to_unet(), seed=cfg.seed)
    t0 = time.perf_counter()
    history = train(model, train_set, None, cfg, out_dir)
    pairs = []
    with deterministic_mode():
        for img, gt in zip(images[n_train:], masks[n_train:]):
            pairs.append((gt, classify(predict_logits(model, img)), img))
    report = evaluate_pair_set(pairs)
    return AnalogueResult(report, history, time.perf_counter() - t0, model)
