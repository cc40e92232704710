"""Training loop: bucketed batches, clipped RMSprop, plateau learning-rate decay."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import BatcherConfig, SubTrajectory, bucketize, fit_normalizer, make_batches, pad_batch
from .nn_core import RmspropState, clip_gradients, global_norm, rmsprop_update
from .seq2seq import ModelConfig, ModelParameters, loss_and_grads, reconstruct

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.9
    patience: int = 4
    clip_norm: float = 5.0
    validation_fraction: float = 0.1
    bucket_width: int = 100
    rng_seed: int = 0
    rho: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, epochs and batch_size must be >= 1")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0  # 0 means the initial parameters were never beaten
    duration_s: float = 0.0

    def records(self) -> list[dict]:
        return [{"epoch": k + 1, "train_loss": tl, "val_loss": vl, "learning_rate": lr,
                 "best": k + 1 == self.best_epoch}
                for k, (tl, vl, lr) in enumerate(zip(self.train_loss, self.val_loss,
                                                     self.learning_rate))]


class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` consecutive failures.

    A failure is a validation loss not strictly below the best seen so far.
    The counter resets after every decay.
    """

    def __init__(self, lr: float, factor: float = 0.9, patience: int = 4,
                 best: float = float("inf")):
        self.lr, self.factor, self.patience = lr, factor, patience
        self.best = best
        self.failures = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns True if it improved."""
        if val_loss < self.best:
            self.best = val_loss
            self.failures = 0
            return True
        self.failures += 1
        if self.failures >= self.patience:
            self.lr *= self.factor
            self.failures = 0
        return False


def split_train_validation(corpus: Sequence, fraction: float, seed: int):
    n = len(corpus)
    if n < 2:
        raise ValueError("need at least 2 samples for a train/validation split")
    n_val = min(max(int(round(n * fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return [corpus[i] for i in train_idx], [corpus[i] for i in val_idx]


def mean_step_loss(params: ModelParameters, subs: Sequence[SubTrajectory],
                   batch_size: int = 256) -> float:
    """Loss per unmasked time step over a corpus, in fixed length-sorted order."""
    order = sorted(range(len(subs)), key=lambda i: (len(subs[i]), i))
    total, steps = 0.0, 0
    for k in range(0, len(order), batch_size):
        batch = pad_batch([subs[i] for i in order[k:k + batch_size]], params.normalizer)
        total += reconstruct(params, batch).loss
        steps += int(batch.lengths.sum())
    return total / steps


def train(corpus: Sequence[SubTrajectory], cfg: TrainConfig,
          model_cfg: ModelConfig | None = None,
          validation: Sequence[SubTrajectory] | None = None,
          val_loss_fn: Callable[[ModelParameters, int], float] | None = None):
    """Fit the autoencoder on normal sub-trajectories.

    ``validation`` defaults to a seeded ``validation_fraction`` hold-out of
    ``corpus``. ``val_loss_fn(params, epoch)`` overrides how validation loss is
    measured (epoch 0 is the untrained model). Returns the parameters of the
    best validation epoch and a :class:`TrainReport`.
    """
    t0 = time.perf_counter()
    model_cfg = model_cfg or ModelConfig()
    if validation is None:
        train_set, validation = split_train_validation(corpus, cfg.validation_fraction,
                                                       cfg.rng_seed)
    else:
        train_set = list(corpus)
    if not train_set:
        raise ValueError("empty training set")
    norm = fit_normalizer(train_set)
    params = ModelParameters.init(model_cfg, norm, cfg.rng_seed)

    def val_loss(p, epoch):
        if val_loss_fn is not None:
            return val_loss_fn(p, epoch)
        return mean_step_loss(p, validation)

    bcfg = BatcherConfig(bucket_width=cfg.bucket_width, batch_size=cfg.batch_size,
                         rng_seed=cfg.rng_seed)
    buckets = bucketize([len(s) for s in train_set], bcfg)

    report = TrainReport()
    report.initial_val_loss = val_loss(params, 0)
    sched = PlateauSchedule(cfg.initial_lr, cfg.lr_decay_factor, cfg.patience,
                            best=report.initial_val_loss)
    best = params
    opt = RmspropState(cfg.initial_lr, cfg.rho, cfg.epsilon)
    tensors = params.tensors()
    total_steps = sum(len(s) for s in train_set)
    for epoch in range(1, cfg.epochs + 1):
        opt.learning_rate = sched.lr
        epoch_loss = 0.0
        for bi, idx in enumerate(make_batches(buckets, bcfg, epoch)):
            batch = pad_batch([train_set[i] for i in idx], norm)
            loss, grads = loss_and_grads(params, batch)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch {bi} "
                                    f"(samples {[train_set[i].key for i in idx[:5]]}...)")
            if not np.isfinite(global_norm(grads)):
                raise TrainingError(f"non-finite gradient in epoch {epoch}, batch {bi}")
            grads = clip_gradients(grads, cfg.clip_norm)
            tensors, opt = rmsprop_update(tensors, grads, opt)
            params = params.with_tensors(tensors)
            epoch_loss += loss
        vl = val_loss(params, epoch)
        report.train_loss.append(epoch_loss / total_steps)
        report.val_loss.append(vl)
        report.learning_rate.append(sched.lr)
        if sched.step(vl):
            best, report.best_epoch = params, epoch
        log.info("epoch %d train %.6g val %.6g lr %.4g", epoch, report.train_loss[-1], vl,
                 report.learning_rate[-1])
    report.duration_s = time.perf_counter() - t0
    return best, report
