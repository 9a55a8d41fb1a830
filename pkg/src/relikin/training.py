"""Optimizer loop with early stopping, and the deterministic -> heteroscedastic warm start."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses
from .data_io import ClipSet
from .errors import ConfigError, LeakageError
from .model import (ModelConfig, ModelParameters, fit_normalization, forward_graph,
                    fresh_log_var_head)
from .seeding import stream

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    loss_weights: dict = field(default_factory=lambda: dict(losses.DEFAULT_WEIGHTS))
    seed: int = 0
    train_dropout: bool = False
    input_noise_mm: float = 0.0  # Gaussian keypoint jitter added to training batches
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        weights = dict(losses.DEFAULT_WEIGHTS)
        unknown = set(self.loss_weights) - set(weights)
        if unknown:
            raise ConfigError(f"unknown loss weight(s): {sorted(unknown)}")
        weights.update({k: float(v) for k, v in self.loss_weights.items()})
        self.loss_weights = weights
        if any(w < 0 for w in weights.values()):
            raise ConfigError("loss weights must be non-negative")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.input_noise_mm < 0:
            raise ConfigError("input_noise_mm must be non-negative")
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ConfigError("batch_size, max_epochs and patience must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_nll: float
    val_mpjpe_mm: float


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    initial: EpochRecord | None = None  # validation metrics before the first update
    best_epoch: int = 0
    stop_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return min(e.val_loss for e in self.epochs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_nll", "val_mpjpe_mm"])
        rows = ([self.initial] if self.initial else []) + self.epochs
        for e in rows:
            w.writerow([e.epoch] + [f"{v:.6g}" for v in
                                    (e.train_loss, e.val_loss, e.val_nll, e.val_mpjpe_mm)])
        return buf.getvalue()


class AdamW:
    """Adam with decoupled weight decay (applied to weight matrices only)."""

    def __init__(self, params: ModelParameters, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.names = params.trainable()
        self.decay = {n: params.decayed(n) for n in self.names}
        self.m = {n: np.zeros_like(params.tensors[n]) for n in self.names}
        self.v = {n: np.zeros_like(params.tensors[n]) for n in self.names}

    def step(self, params: ModelParameters, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in self.names:  # fixed order keeps runs bit-reproducible
            p = params.tensors[n]
            g = grads[n]
            if self.decay[n]:
                p *= 1.0 - self.lr * self.weight_decay
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def check_disjoint_subjects(*sets: ClipSet) -> None:
    seen: dict[str, int] = {}
    for i, s in enumerate(sets):
        for subj in set(s.subject_ids):
            if subj in seen and seen[subj] != i:
                raise LeakageError(f"subject {subj} appears in more than one split")
            seen[subj] = i


def loss_and_grads(params: ModelParameters, batch: ClipSet, config: TrainingConfig,
                   rng: np.random.Generator | None = None):
    cfg = params.config
    with ad.Tape() as tape:
        leaves = {}
        for name, value in params.tensors.items():
            leaves[name] = tape.watch(value, name) if not name.startswith("norm.") else value
        mean, log_var = forward_graph(leaves, cfg, batch.inputs, rng)
        loss = losses.composite_loss(mean, log_var, batch.landmarks, batch.validity,
                                     config.loss_weights, batch.triplets)
    grads = ad.backward(loss)
    return loss.item(), {n: grads[leaves[n]] for n in params.trainable()}


def evaluate(params: ModelParameters, data: ClipSet, weights=None, batch_size: int = 64) -> dict:
    """Validation loss, likelihood term and MPJPE (mm) with dropout off."""
    weights = losses.DEFAULT_WEIGHTS if weights is None else weights
    total = nll = err = 0.0
    n = len(data)
    valid = data.validity
    for start in range(0, n, batch_size):
        part = data.subset(range(start, min(start + batch_size, n)))
        mean, log_var = forward_graph(params.tensors, params.config, part.inputs, None)
        terms = losses.loss_terms(mean, log_var, part.landmarks, valid, part.triplets, weights)
        w = len(part) / n
        total += w * losses.combine(terms, weights).item()
        nll += w * terms["nll"].item()
        dist = np.linalg.norm(mean.value - part.landmarks, axis=-1)[..., valid]
        err += w * dist.mean()
    return {"loss": total, "nll": nll, "mpjpe_mm": 1000.0 * err}


def train(params: ModelParameters, train_set: ClipSet, val_set: ClipSet,
          config: TrainingConfig, progress=None):
    """AdamW with early stopping on validation loss; returns the best-epoch parameters."""
    check_disjoint_subjects(train_set, val_set)
    if not params.norm_fitted:
        params = fit_normalization(params, train_set.keypoints, train_set.landmarks)
    params = params.copy()
    opt = AdamW(params, config.learning_rate, config.weight_decay,
                (config.beta1, config.beta2), config.eps)
    history = TrainingHistory()
    ev = evaluate(params, val_set, config.loss_weights, config.batch_size)
    history.initial = EpochRecord(0, math.nan, ev["loss"], ev["nll"], ev["mpjpe_mm"])

    best_loss = math.inf
    best = params.copy()
    since_best = 0
    n = len(train_set)
    for epoch in range(1, config.max_epochs + 1):
        order = stream(config.seed, "shuffle", epoch).permutation(n)
        running = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            rng = (stream(config.seed, "train-dropout", epoch, b)
                   if config.train_dropout else None)
            batch = train_set.subset(idx)
            if config.input_noise_mm > 0:
                jitter = stream(config.seed, "train-noise", epoch, b).standard_normal(
                    batch.keypoints.shape)
                batch.keypoints = batch.keypoints + (config.input_noise_mm / 1000.0) * jitter
            loss, grads = loss_and_grads(params, batch, config, rng)
            opt.step(params, grads)
            running += loss * len(idx) / n
        ev = evaluate(params, val_set, config.loss_weights, config.batch_size)
        rec = EpochRecord(epoch, running, ev["loss"], ev["nll"], ev["mpjpe_mm"])
        history.epochs.append(rec)
        if progress is not None:
            progress(rec)
        log.info("epoch %d train %.5g val %.5g mpjpe %.3f mm", epoch, running, ev["loss"],
                 ev["mpjpe_mm"])
        if ev["loss"] < best_loss:
            best_loss = ev["loss"]
            best = params.copy()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        history.stop_epoch = epoch
        if since_best >= config.patience:
            break
    return best, history


def warm_start_heteroscedastic(deterministic: ModelParameters,
                               config: ModelConfig | None = None) -> ModelParameters:
    """Copy every shared weight from a deterministic model and add a fresh log-variance head."""
    src = deterministic.config
    if src.heteroscedastic:
        raise ConfigError("warm start expects a deterministic (heteroscedastic=false) model")
    target = replace(src, heteroscedastic=True) if config is None else config
    if not target.heteroscedastic:
        raise ConfigError("warm start target config must be heteroscedastic")
    shared = ("input_dim", "landmark_count", "hidden_size", "num_layers", "seq_len")
    bad = [k for k in shared if getattr(src, k) != getattr(target, k)]
    if bad:
        raise ConfigError(f"warm start config mismatch in {bad}")
    out = deterministic.copy()
    out.config = target
    out.tensors.update(fresh_log_var_head(target))
    return out
