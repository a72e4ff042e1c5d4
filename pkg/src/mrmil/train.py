"""Mini-batch training with early stopping on validation mean AUC."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DEFAULT_ZOOM_RANGE, Dataset, augment
from .metrics import roc_auc
from .model import Model, mil_loss
from .optim import Adam, NonFiniteGradient
from .pooling import NonFiniteInput, clamp_beta

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, r_eff, detail: str = "non-finite loss"):
        self.epoch, self.batch, self.r_eff = epoch, batch, r_eff
        super().__init__(f"{detail} at epoch {epoch}, batch {batch} (r_eff={r_eff})")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 8
    max_epochs: int = 50
    max_steps: int = 2000
    patience: int = 10
    augment: bool = True
    zoom_range: tuple[float, float] = DEFAULT_ZOOM_RANGE
    seed: int = 0
    record_wall_time: bool = False


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mean_auc: float
    r_eff: float
    wall_time: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("-inf")
    steps: int = 0


def mean_auc(model: Model, ds: Dataset) -> float:
    P, _ = model.predict(ds.images())
    y = ds.labels()
    return float(np.mean([roc_auc(P[:, k], y[:, k]) for k in range(y.shape[1])]))


def train(model: Model, train_set: Dataset, val_set: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train in place; on return the model holds the best-validation-AUC parameters.

    ``r_eff`` in the history is the sharpness in effect at the start of each
    epoch (so the first row shows ``r0 + exp(beta_init)``).
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    images = train_set.images()
    labels = train_set.labels()
    n = len(train_set)
    result = TrainResult()
    best_state = model.state_dict()
    since_best = 0
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        if result.steps >= cfg.max_steps:
            break
        r_eff_start = float(np.mean(model.r_eff()))
        order = rng.permutation(n)
        losses = []
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            if result.steps >= cfg.max_steps:
                break
            idx = order[lo:lo + cfg.batch_size]
            x = images[idx]
            if cfg.augment:
                x = np.stack([augment(img[0], rng, cfg.zoom_range) for img in x])[:, None]
            try:
                loss = mil_loss(model.forward(x), labels[idx])
            except NonFiniteInput as exc:
                raise TrainingDiverged(epoch, b, model.r_eff().tolist(), str(exc)) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, model.r_eff().tolist())
            opt.zero_grad()
            T.backward(loss)
            try:
                opt.step()
            except NonFiniteGradient as exc:
                raise TrainingDiverged(epoch, b, model.r_eff().tolist(), str(exc)) from exc
            if model.beta is not None:
                clamp_beta(model.beta)
            losses.append(value)
            result.steps += 1

        val_auc = mean_auc(model, val_set)
        wall = time.perf_counter() - start if cfg.record_wall_time else 0.0
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), val_auc, r_eff_start, wall)
        result.history.append(rec)
        log.info("epoch %d loss %.4f val_auc %.4f r_eff %.3f steps %d", epoch, rec.train_loss, val_auc,
                 r_eff_start, result.steps)
        if val_auc > result.best_val_auc:
            result.best_val_auc, result.best_epoch = val_auc, epoch
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model.load_state_dict(best_state)
    return result
