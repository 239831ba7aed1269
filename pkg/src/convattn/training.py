"""Frame-level cross-entropy training: loss, Adam, warmup LR schedule, loop.

The loop is deterministic given the seed: batch order, dropout masks and
parameter updates all derive from it, so reruns produce bit-identical
checkpoints and logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Utterance, make_batches, validation_split
from .errors import ConfigError, DataError, DivergenceError
from .model import (
    DropoutCtx,
    ModelConfig,
    encoder_forward,
    init_params,
    save_checkpoint,
)
from .tensor import Tensor, log_softmax_lastaxis, scale, slice_axis0, take_rowwise, tmean


@dataclass
class ScheduleConfig:
    model_dim: int
    warmup_steps: int
    multiplier: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    seed: int = 0
    best_val_loss: float = math.inf


def noam_lr(step: int, schedule: ScheduleConfig) -> float:
    """multiplier * d^-0.5 * min(step^-0.5, step * warmup^-1.5); peaks at warmup."""
    if step < 1:
        raise ConfigError(f"noam_lr needs step >= 1, got {step}")
    w = schedule.warmup_steps
    return (schedule.multiplier * schedule.model_dim ** -0.5
            * min(step ** -0.5, step * w ** -1.5))


def cross_entropy_frame_loss(logits: Tensor, labels, valid_len: int,
                             utt_id: str = "?") -> tuple[Tensor, float]:
    """Mean negative log-probability of the true label over the first
    valid_len frames, plus top-1 frame accuracy."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if not (1 <= valid_len <= logits.shape[0]):
        raise DataError(f"utterance {utt_id!r}: valid_len {valid_len} out of range "
                        f"for {logits.shape[0]} frames")
    for t in range(valid_len):
        if not 0 <= labels[t] < num_classes:
            raise DataError(f"utterance {utt_id!r} frame {t}: label {labels[t]} "
                            f"outside [0, {num_classes})")
    logp = log_softmax_lastaxis(slice_axis0(logits, 0, valid_len))
    picked = take_rowwise(logp, labels[:valid_len])
    loss = scale(tmean(picked), -1.0)
    pred = np.argmax(logp.data, axis=-1)
    accuracy = float(np.mean(pred == labels[:valid_len]))
    return loss, accuracy


def init_train_state(config: ModelConfig, seed: int) -> TrainState:
    params = init_params(config, seed=seed, dtype=np.float32)
    zeros = {name: np.zeros_like(p.data) for name, p in params.items()}
    return TrainState(params=params,
                      m={k: v.copy() for k, v in zeros.items()},
                      v={k: v.copy() for k, v in zeros.items()},
                      step=0, seed=seed)


def adam_step(state: TrainState, grads: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.98, eps: float = 1e-9,
              grad_clip: Optional[float] = None) -> TrainState:
    """Standard Adam with bias correction; mutates and returns state."""
    for name in state.params:
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r} "
                                  f"at step {state.step + 1}")
    if grad_clip is not None:
        total = math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
                              for g in grads.values()))
        if total > grad_clip:
            factor = np.float32(grad_clip / total)
            grads = {k: g * factor for k, g in grads.items()}
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(p.data.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= p.data.dtype.type(beta1)
        m += p.data.dtype.type(1.0 - beta1) * g
        v *= p.data.dtype.type(beta2)
        v += p.data.dtype.type(1.0 - beta2) * (g * g)
        mhat = m / p.data.dtype.type(bc1)
        vhat = v / p.data.dtype.type(bc2)
        p.data -= p.data.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.data.dtype.type(eps))
    return state


def _zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def batch_loss(batch, config: ModelConfig, params: dict, training: bool = False,
               dctx: Optional[DropoutCtx] = None) -> tuple[Tensor, float, int]:
    """Frame-weighted mean CE over the batch's valid frames.

    Each utterance is processed unpadded, so padding never influences its
    contribution. Returns (loss, frame accuracy, valid frame count).
    """
    total_frames = batch.num_valid_frames
    pieces = []
    correct_frames = 0.0
    for b, utt_id in enumerate(batch.ids):
        t_len = int(batch.lengths[b])
        feats = batch.features[b, :t_len]
        logits = encoder_forward(feats, config, params, training=training, dctx=dctx)
        loss_u, acc_u = cross_entropy_frame_loss(logits, batch.labels[b, :t_len],
                                                 t_len, utt_id=utt_id)
        pieces.append(scale(loss_u, t_len / total_frames))
        correct_frames += acc_u * t_len
    total = pieces[0]
    for piece in pieces[1:]:
        total = total + piece
    return total, correct_frames / total_frames, total_frames


def evaluate(config: ModelConfig, params: dict,
             utterances: Sequence[Utterance]) -> tuple[float, float]:
    """Dataset-level CE loss and frame accuracy, eval mode (no dropout)."""
    if not utterances:
        raise DataError("cannot evaluate on an empty dataset")
    total_nll = 0.0
    total_correct = 0.0
    total_frames = 0
    for utt in utterances:
        if utt.labels is None:
            raise DataError(f"utterance {utt.id!r} has no labels")
        logits = encoder_forward(utt.features, config, params)
        loss, acc = cross_entropy_frame_loss(logits, utt.labels, utt.num_frames,
                                             utt_id=utt.id)
        total_nll += loss.item() * utt.num_frames
        total_correct += acc * utt.num_frames
        total_frames += utt.num_frames
    return total_nll / total_frames, total_correct / total_frames


@dataclass
class TrainResult:
    state: TrainState
    history: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)
    stopped_early: bool = False


def train_loop(config: ModelConfig, dataset: Sequence[Utterance],
               schedule: ScheduleConfig, epochs: int, frames_per_batch: int,
               seed: int, out_dir=None, log_path=None, log_interval: int = 20,
               patience: Optional[int] = None, beta1: float = 0.9,
               beta2: float = 0.98, adam_eps: float = 1e-9,
               grad_clip: Optional[float] = None) -> TrainResult:
    config.validate()
    if not dataset:
        raise DataError("training dataset is empty")
    train_utts, val_utts = validation_split(dataset, seed=seed)
    if not train_utts:
        raise DataError("training split is empty")
    state = init_train_state(config, seed=seed)
    result = TrainResult(state=state)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a") if log_path is not None else None

    def emit(line: str):
        result.log_lines.append(line)
        if log_fh is not None:
            log_fh.write(line + "\n")
            log_fh.flush()

    epochs_since_best = 0
    try:
        for epoch in range(1, epochs + 1):
            batches = make_batches(train_utts, frames_per_batch,
                                   seed=seed + 1000003 * epoch)
            epoch_loss = 0.0
            epoch_frames = 0
            for batch in batches:
                _zero_grads(state.params)
                dctx = DropoutCtx(seed, state.step + 1)
                loss, acc, n_frames = batch_loss(batch, config, state.params,
                                                 training=True, dctx=dctx)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise DivergenceError(f"non-finite training loss at step "
                                          f"{state.step + 1}")
                loss.backward()
                grads = {name: p.grad for name, p in state.params.items()
                         if p.grad is not None}
                lr = noam_lr(state.step + 1, schedule)
                adam_step(state, grads, lr, beta1=beta1, beta2=beta2,
                          eps=adam_eps, grad_clip=grad_clip)
                epoch_loss += loss_val * n_frames
                epoch_frames += n_frames
                if state.step % log_interval == 0 or state.step == 1:
                    emit(f"step={state.step} lr={lr:.10g} "
                         f"train_loss={loss_val:.10g} train_acc={acc:.6g}")

            record = {"epoch": epoch, "train_loss": epoch_loss / epoch_frames}
            if val_utts:
                val_loss, val_acc = evaluate(config, state.params, val_utts)
                record["val_loss"] = val_loss
                record["val_acc"] = val_acc
                emit(f"epoch={epoch} train_loss={record['train_loss']:.10g} "
                     f"val_loss={val_loss:.10g} val_acc={val_acc:.6g}")
                if val_loss < state.best_val_loss:
                    state.best_val_loss = val_loss
                    epochs_since_best = 0
                else:
                    epochs_since_best += 1
            else:
                emit(f"epoch={epoch} train_loss={record['train_loss']:.10g}")
            result.history.append(record)
            if out_dir is not None:
                save_checkpoint(out_dir / f"epoch{epoch:03d}.ckpt", config, state.params)
            if patience is not None and epochs_since_best > patience:
                emit(f"early_stop_epoch={epoch}")
                result.stopped_early = True
                break
        if out_dir is not None:
            save_checkpoint(out_dir / "final.ckpt", config, state.params)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
