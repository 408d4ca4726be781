"""Optimiser, schedule and the training loops for both regimes and the baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor, backward, take_rows
from .losses import (
    DegenerateBatchError,
    IntervalGrid,
    SharedStack,
    adversarial_loss,
    discriminator_loss,
    drim_total,
    reconstruction_loss,
    shared_loss,
    survival_loss,
)
from .metrics import evaluate
from .model import BaselineModel, DRIMModel, ModelConfig, build_model
from .nn import Module, Parameter
from .synth import PatientBatch

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "split", "loss_total", "loss_task", "loss_shared", "loss_adv", "loss_disc", "lr")


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    disc_lr: float = 1e-3
    disc_weight_decay: float = 3e-4
    epochs: int = 30
    finetune_epochs: int = 10
    batch_size: int = 24
    gamma: float = 0.8
    tau: float = 0.1
    n_intervals: int = 20
    d: int = 16
    seed: int = 0
    regime: str = "surv"  # "surv" or "unsup"
    fusion: str = "mafusion"
    aux_unique_heads: bool = True
    disc_steps: int = 1
    adv_updates_shared: bool = False
    heads: int = 4
    head_dim: int = 16
    dropout: float = 0.1
    normalize_shared: bool = True
    slot_embeddings: bool = True
    min_batch: int = 4

    def validate(self) -> None:
        if min(self.lr, self.disc_lr) <= 0 or min(self.weight_decay, self.disc_weight_decay) < 0:
            raise ValueError("learning rates must be positive and weight decays non-negative")
        if min(self.epochs, self.batch_size, self.n_intervals, self.d, self.disc_steps) < 1:
            raise ValueError("epochs, batch_size, n_intervals, d and disc_steps must be positive")
        if self.finetune_epochs < 0 or self.gamma < 0 or self.tau <= 0:
            raise ValueError("finetune_epochs and gamma must be non-negative, tau positive")
        if self.regime not in ("surv", "unsup"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.regime == "unsup" and self.fusion != "mafusion":
            raise ValueError("the unsupervised regime requires mafusion")

    def model_config(self, feature_dims: Sequence[int], decoders: bool = False) -> ModelConfig:
        return ModelConfig(
            feature_dims=list(feature_dims), d=self.d, n_intervals=self.n_intervals, heads=self.heads,
            head_dim=self.head_dim, dropout=self.dropout, fusion=self.fusion,
            normalize_shared=self.normalize_shared, slot_embeddings=self.slot_embeddings,
            aux_unique_heads=self.aux_unique_heads, decoders=decoders,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimisation -----------------------------------------------------------------------


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return base_lr * (1.0 + math.cos(math.pi * t / total_steps)) / 2.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """One AdamW step; weight decay acts on the weights directly, not via the gradient."""
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    return param * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: Sequence[Parameter], weight_decay: float = 1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.weight_decay, self.betas, self.eps = weight_decay, betas, eps
        self.state = {id(p): AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params}
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> bool:
        """Apply one update; a non-finite gradient skips the whole step."""
        grads = [p.grad for p in self.params]
        if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient, skipping optimiser step (%d skipped so far)", self.skipped)
            return False
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            p.data = adamw_update(p.data, g, self.state[id(p)], lr, self.weight_decay, self.betas, self.eps)
        return True


# -- helpers -------------------------------------------------------------------------------


def minibatches(n: int, batch_size: int, rng: np.random.Generator, min_batch: int = 4) -> list[np.ndarray]:
    """Shuffled batches without replacement; a short last batch survives only if >= ``min_batch``."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < min(min_batch, batch_size):
        batches.pop()
    return batches


def _rng_streams(seed: int, n: int = 5) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _check_finite(value: Tensor, what: str) -> float:
    x = value.item()
    if not math.isfinite(x):
        raise NumericalAbort(f"{what} became non-finite ({x})")
    return x


def grad_norm(params: Sequence[Parameter]) -> float:
    return float(math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))


def make_grid(times, n_intervals: int) -> IntervalGrid:
    return IntervalGrid.from_times(times, n_intervals)


def _task_loss(model: DRIMModel, fused: Tensor, unique, times, events, present, grid) -> Tensor:
    loss = survival_loss(model.head(fused), times, events, grid)
    if model.aux_heads:
        aux = []
        for m, (head, u) in enumerate(zip(model.aux_heads, unique)):
            idx = np.flatnonzero(present[m])
            if idx.size:
                aux.append(survival_loss(head(take_rows(u, idx)), times[idx], events[idx], grid))
        if aux:
            total = aux[0]
            for a in aux[1:]:
                total = total + a
            loss = loss + total / len(model.aux_heads)
    return loss


@dataclass
class TrainResult:
    model: Module
    grid: IntervalGrid
    log: list[dict] = field(default_factory=list)
    skipped_batches: int = 0
    frozen_grad_norms: list[float] = field(default_factory=list)
    pretrain_log: list[dict] = field(default_factory=list)


class _EpochMeter:
    def __init__(self):
        self.sums = {k: 0.0 for k in LOG_COLUMNS[2:-1]}
        self.n = 0

    def add(self, **values):
        for k, v in values.items():
            self.sums[k] += v
        self.n += 1

    def row(self, epoch: int, lr: float, split: str = "train") -> dict:
        n = max(self.n, 1)
        return {"epoch": epoch, "split": split, **{k: v / n for k, v in self.sums.items()}, "lr": lr}


# -- DRIM training ------------------------------------------------------------------------------


def _drim_epochs(model: DRIMModel, data: PatientBatch, config: TrainConfig, grid: IntervalGrid, epochs: int,
                 streams, objective: str, result: TrainResult, log_rows: list) -> None:
    """Alternating discriminator / main updates for ``epochs`` passes over ``data``.

    ``objective`` is ``"surv"`` (hazard likelihood through both fusion
    scales) or ``"recon"`` (decoders reconstruct each modality from its
    unique representation).
    """
    _, batch_rng, drop_rng, shuffle_rng, _ = streams
    model.set_dropout_rng(drop_rng)
    if objective == "surv":
        main_params = model.encoder_parameters() + model.task_parameters()
    else:
        main_params = model.encoder_parameters() + model.decoder_parameters()
    main_opt = AdamW(main_params, config.weight_decay)
    disc_opt = AdamW(model.discriminator_parameters(), config.disc_weight_decay)
    n_batches = len(minibatches(data.n_patients, config.batch_size, np.random.default_rng(0), config.min_batch))
    total_steps = max(epochs * n_batches, 1)
    step = 0

    for epoch in range(1, epochs + 1):
        model.train()
        meter = _EpochMeter()
        lr = cosine_lr(config.lr, step, total_steps)
        for idx in minibatches(data.n_patients, config.batch_size, batch_rng, config.min_batch):
            lr = cosine_lr(config.lr, step, total_steps)
            disc_lr = cosine_lr(config.disc_lr, step, total_steps)
            step += 1
            feats = [x[idx] for x in data.features]
            pres = data.present[:, idx]
            times, events = data.time[idx], data.event[idx]

            shared, unique = model.encode(feats, pres)
            try:
                # one modality has no cross-modal positives at all, so the term is absent
                l_sh = shared_loss(SharedStack.from_modalities(shared, pres, config.tau)) if len(shared) > 1 \
                    else Tensor(0.0)
            except DegenerateBatchError:
                result.skipped_batches += 1
                log.warning("epoch %d: degenerate batch skipped", epoch)
                continue

            disc_value = 0.0
            for _ in range(config.disc_steps):
                l_disc = discriminator_loss(shared, unique, model.discriminators, pres, shuffle_rng)
                if l_disc is None:
                    break
                disc_opt.zero_grad()
                backward(l_disc)
                disc_opt.step(disc_lr)
                disc_value = _check_finite(l_disc, "discriminator loss")

            adv = adversarial_loss(shared, unique, model.discriminators, pres, config.adv_updates_shared)
            adv = adv if adv is not None else Tensor(0.0)
            if objective == "surv":
                task = _task_loss(model, model.fuse(shared, unique, pres), unique, times, events, pres, grid)
            else:
                recon = [R(u) for R, u in zip(model.decoders, unique)]
                task = reconstruction_loss(recon, feats, pres)
            total = drim_total(task, l_sh, adv, config.gamma)
            total_value = _check_finite(total, "training loss")
            main_opt.zero_grad()
            backward(total)
            main_opt.step(lr)
            meter.add(loss_total=total_value, loss_task=task.item(), loss_shared=l_sh.item(),
                      loss_adv=adv.item(), loss_disc=disc_value)
        log_rows.append(meter.row(epoch, lr))


def _finetune_epochs(model: DRIMModel, data: PatientBatch, config: TrainConfig, grid: IntervalGrid,
                     epochs: int, streams, result: TrainResult) -> None:
    """Train fusion and heads on survival with every encoder frozen."""
    _, batch_rng, drop_rng, _, _ = streams
    model.set_dropout_rng(drop_rng)
    encoders = model.encoder_parameters()
    for p in encoders:
        p.set_trainable(False)
    opt = AdamW(model.task_parameters(), config.weight_decay)
    n_batches = len(minibatches(data.n_patients, config.batch_size, np.random.default_rng(0), config.min_batch))
    total_steps = max(epochs * n_batches, 1)
    step = 0
    for epoch in range(1, epochs + 1):
        model.train()
        for enc in model.encoders:
            enc.train(False)
        meter = _EpochMeter()
        lr = cosine_lr(config.lr, step, total_steps)
        for idx in minibatches(data.n_patients, config.batch_size, batch_rng, config.min_batch):
            lr = cosine_lr(config.lr, step, total_steps)
            step += 1
            feats = [x[idx] for x in data.features]
            pres = data.present[:, idx]
            shared, unique = model.encode(feats, pres)
            task = _task_loss(model, model.fuse(shared, unique, pres), unique, data.time[idx],
                              data.event[idx], pres, grid)
            value = _check_finite(task, "fine-tuning loss")
            opt.zero_grad()
            backward(task)
            result.frozen_grad_norms.append(grad_norm(encoders))
            opt.step(lr)
            meter.add(loss_total=value, loss_task=value)
        result.log.append(meter.row(epoch, lr, split="finetune"))


def train_drim_surv(data: PatientBatch, config: TrainConfig, grid: IntervalGrid | None = None) -> TrainResult:
    """End-to-end supervised training of the two-scale model."""
    config.validate()
    streams = _rng_streams(config.seed)
    grid = grid or make_grid(data.time, config.n_intervals)
    model = DRIMModel(config.model_config(data.feature_dims), streams[0])
    result = TrainResult(model, grid)
    _drim_epochs(model, data, config, grid, config.epochs, streams, "surv", result, result.log)
    model.eval()
    return result


def finetune_frozen(model: DRIMModel, data: PatientBatch, config: TrainConfig,
                    grid: IntervalGrid | None = None, result: TrainResult | None = None) -> TrainResult:
    """Fresh fusion + heads trained on top of ``model``'s encoders, which stay frozen."""
    streams = _rng_streams(config.seed + 7919)
    grid = grid or make_grid(data.time, config.n_intervals)
    model.build_task_stack(streams[0])
    result = result or TrainResult(model, grid)
    result.grid = grid
    _finetune_epochs(model, data, config, grid, config.finetune_epochs, streams, result)
    model.eval()
    return result


def train_drim_u(data: PatientBatch, config: TrainConfig, grid: IntervalGrid | None = None,
                 pretrain: bool = True) -> TrainResult:
    """Unsupervised pretraining (reconstruction + shared + adversarial), then frozen fine-tuning.

    With ``pretrain=False`` the encoders keep their random initialisation,
    which gives the frozen-random-encoder control.
    """
    config.validate()
    streams = _rng_streams(config.seed)
    grid = grid or make_grid(data.time, config.n_intervals)
    model = DRIMModel(config.model_config(data.feature_dims, decoders=True), streams[0])
    result = TrainResult(model, grid)
    if pretrain:
        _drim_epochs(model, data, config, grid, config.epochs, streams, "recon", result, result.pretrain_log)
    return finetune_frozen(model, data, config, grid, result)


def train_baseline(data: PatientBatch, config: TrainConfig, grid: IntervalGrid | None = None) -> TrainResult:
    """Survival-only training with a parameter-free fusion (mean/sum/max/concat/tensor)."""
    config.validate()
    streams = _rng_streams(config.seed)
    _, batch_rng, drop_rng, _, _ = streams
    grid = grid or make_grid(data.time, config.n_intervals)
    model = BaselineModel(config.model_config(data.feature_dims), streams[0])
    model.set_dropout_rng(drop_rng)
    result = TrainResult(model, grid)
    opt = AdamW(model.parameters(), config.weight_decay)
    n_batches = len(minibatches(data.n_patients, config.batch_size, np.random.default_rng(0), config.min_batch))
    total_steps = max(config.epochs * n_batches, 1)
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        meter = _EpochMeter()
        lr = cosine_lr(config.lr, step, total_steps)
        for idx in minibatches(data.n_patients, config.batch_size, batch_rng, config.min_batch):
            lr = cosine_lr(config.lr, step, total_steps)
            step += 1
            h = model.hazards([x[idx] for x in data.features], data.present[:, idx])
            loss = survival_loss(h, data.time[idx], data.event[idx], grid)
            value = _check_finite(loss, "training loss")
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
            meter.add(loss_total=value, loss_task=value)
        result.log.append(meter.row(epoch, lr))
    model.eval()
    return result


def train(data: PatientBatch, config: TrainConfig, grid: IntervalGrid | None = None) -> TrainResult:
    if config.regime == "unsup":
        return train_drim_u(data, config, grid)
    if config.fusion == "mafusion":
        return train_drim_surv(data, config, grid)
    return train_baseline(data, config, grid)


def evaluate_model(model, data: PatientBatch, grid: IntervalGrid) -> dict:
    hazards = model.predict(data.features, data.present)
    return evaluate(hazards, data.time, data.event, grid)


def cross_validate(data: PatientBatch, test: PatientBatch, config: TrainConfig, folds: int = 5) -> list[dict]:
    """Train on each ``folds-1`` of ``folds`` stratified folds, score on ``test``."""
    from .synth import split_indices

    parts = split_indices(data.event, [1.0 / folds] * folds, config.seed)
    scores = []
    for k in range(folds):
        idx = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != k]))
        run = train(data.subset(idx), TrainConfig(**{**config.to_dict(), "seed": config.seed + k}))
        scores.append(evaluate_model(run.model, test, run.grid))
    return scores


def build_from_checkpoint(model_config: ModelConfig, state: dict) -> Module:
    model = build_model(model_config, np.random.default_rng(0))
    model.load_state_dict(state)
    model.eval()
    return model
