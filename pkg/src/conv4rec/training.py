"""Cross-entropy reconstruction objective, backprop and the block schedule.

Every cell of a user's row is a (k+1)-way classification: channel 0 for
"not observed", channels 1..k for the rating. Training runs in blocks of
epochs; after each block the parameters are snapshotted and a validation
metric is computed. Training stops as soon as that metric fails to improve, and
predictions average the probability tensors of all snapshots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ObservedDataset, dense_slices
from .model import (
    DecoderSpec,
    EncoderSpec,
    ForwardOutput,
    ModelParams,
    backward_trace,
    forward_trace,
    init_params,
    outputs_from_probs,
    predict_users,
)
from .numerics import NadamState, log_softmax, make_rng, nadam_step, stable_softmax

_log = logging.getLogger(__name__)

__all__ = [
    "NumericalError",
    "TrainConfig",
    "TrainState",
    "reconstruction_loss",
    "loss_and_grad",
    "backward",
    "gradcheck",
    "train",
    "averaged_predict",
    "write_history",
]

LOG_FLOOR = math.log(1e-30)
METRICS = ("validation-loss", "rmse", "recall@50")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epoch_block: int = 10
    max_blocks: int = 4
    metric: str = "validation-loss"
    seed: int = 0
    L: int = 3
    r: int = 32
    K: int = 12
    enc_K: int | None = None
    L0: int = 1
    biases: bool = False
    weight_decay: float = 0.0
    flatten_lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.epoch_block < 1 or self.max_blocks < 1:
            raise ValueError("epoch_block and max_blocks must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.lr <= 0 or self.flatten_lr_scale <= 0:
            raise ValueError("learning rate and its flatten-layer scale must be positive")

    def specs(self, n: int, k: int) -> tuple[EncoderSpec, DecoderSpec]:
        enc_K = self.enc_K or self.K
        enc = EncoderSpec(n, k, (enc_K,), (self.r,), self.biases)
        dec = DecoderSpec.uniform(n, k, self.r, self.L, self.K, self.L0, self.biases)
        return enc, dec


@dataclass
class TrainState:
    config: TrainConfig
    params: ModelParams
    train: ObservedDataset
    validation: ObservedDataset | None = None
    opt: list[NadamState] = field(default_factory=list)
    epoch: int = 0
    checkpoints: list[ModelParams] = field(default_factory=list)
    block_metrics: list[float] = field(default_factory=list)
    history: list[tuple[int, float, float]] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def scale(self):
        return self.params.scale

    def predict_users(self, users: Sequence[int]) -> np.ndarray:
        """Checkpoint-averaged probability tensor for ``users``."""
        return averaged_probs(self.checkpoints, self.train, users)

    @property
    def best_block_metric(self) -> float:
        if not self.block_metrics:
            return math.nan
        worse = _worse(self.config.metric)
        best = self.block_metrics[0]
        for v in self.block_metrics[1:]:
            if worse(best, v):
                best = v
        return best


def _worse(metric: str):
    """``worse(new, old)`` is True when ``new`` fails to improve on ``old``.

    A tie counts as worse so a stalled (e.g. dead) network stops too.
    """
    if metric == "recall@50":
        return lambda new, old: not new > old
    return lambda new, old: not new < old


def _cell_losses(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    logp = log_softmax(scores, axis=-1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return -np.maximum(picked, LOG_FLOOR)


def _batch_inputs(train: ObservedDataset, users: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    users = np.asarray(users, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= train.m):
        raise IndexError(f"user index out of range [0, {train.m})")
    return dense_slices(train, users)


def reconstruction_loss(params: ModelParams, users: Sequence[int], train: ObservedDataset) -> float:
    """Mean cross-entropy over every cell of the listed users' rows."""
    x, t = _batch_inputs(train, users)
    scores, _ = forward_trace(params, x)
    return float(_cell_losses(scores, t).mean())


def _loss_grad_dense(params: ModelParams, x: np.ndarray, t: np.ndarray,
                     weight_decay: float = 0.0) -> tuple[float, list[np.ndarray]]:
    scores, trace = forward_trace(params, x)
    loss = float(_cell_losses(scores, t).mean())
    g = stable_softmax(scores, axis=-1)
    np.put_along_axis(g, t[..., None], np.take_along_axis(g, t[..., None], axis=-1) - 1.0, axis=-1)
    g /= t.size
    grads = backward_trace(params, trace, g)
    if weight_decay:
        n_w = len(params.enc_w)
        idx_w = list(range(n_w))
        off = n_w * (2 if params.has_biases else 1)
        idx_w += list(range(off, off + len(params.dec_w)))
        arrays = params.arrays()
        for i in idx_w:
            loss += 0.5 * weight_decay * float(np.sum(arrays[i] ** 2))
            grads[i] = grads[i] + weight_decay * arrays[i]
    return loss, grads


def loss_and_grad(params: ModelParams, users: Sequence[int], train: ObservedDataset,
                  weight_decay: float = 0.0) -> tuple[float, list[np.ndarray]]:
    x, t = _batch_inputs(train, users)
    return _loss_grad_dense(params, x, t, weight_decay)


def backward(params: ModelParams, users: Sequence[int], train: ObservedDataset) -> list[np.ndarray]:
    """Analytic gradient of :func:`reconstruction_loss`, ordered as ``params.arrays()``."""
    return loss_and_grad(params, users, train)[1]


def gradcheck(params: ModelParams, users: Sequence[int], train: ObservedDataset,
              h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The relative error of one entry is ``|a - f| / max(|a|, |f|, floor)``.
    """
    x, t = _batch_inputs(train, users)
    _, grads = _loss_grad_dense(params, x, t)

    def loss() -> float:
        scores, _ = forward_trace(params, x)
        return float(_cell_losses(scores, t).mean())

    worst = 0.0
    for arr, grad in zip(params.arrays(), grads):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss()
            flat[idx] = orig - h
            down = loss()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            err = abs(gflat[idx] - fd) / max(abs(gflat[idx]), abs(fd), floor)
            worst = max(worst, err)
    return float(worst)


def _validation_loss(params: ModelParams, train: ObservedDataset, val: ObservedDataset,
                     batch: int = 256) -> float:
    """Mean cross-entropy at held-out triples, inputs taken from the train rows."""
    if val.N == 0:
        return math.nan
    total = 0.0
    users = np.unique(val.users)
    for lo in range(0, users.size, batch):
        chunk = users[lo:lo + batch]
        x, _ = dense_slices(train, chunk)
        scores, _ = forward_trace(params, x)
        logp = log_softmax(scores, axis=-1)
        pos = np.searchsorted(chunk, val.users)
        sel = (pos < chunk.size) & (chunk[np.minimum(pos, chunk.size - 1)] == val.users)
        vals = logp[pos[sel], val.items[sel], val.ratings[sel]]
        total += float(-np.maximum(vals, LOG_FLOOR).sum())
    return total / val.N


def _block_metric(state: TrainState) -> float:
    metric = state.config.metric
    if state.validation is None or state.validation.N == 0:
        return math.nan
    if metric == "validation-loss":
        return _validation_loss(state.params, state.train, state.validation)
    from . import evaluation

    snap = _Snapshot(state.params, state.train)
    if metric == "rmse":
        return evaluation.rmse(snap, state.validation)
    return evaluation.recall_at_k(snap, state.train, state.validation, 50)


@dataclass
class _Snapshot:
    params: ModelParams
    train: ObservedDataset

    @property
    def scale(self):
        return self.params.scale

    def predict_users(self, users):
        return predict_users(self.params, self.train, users)


def new_state(config: TrainConfig, train: ObservedDataset,
              validation: ObservedDataset | None = None) -> TrainState:
    enc, dec = config.specs(train.n, train.k)
    params = init_params(enc, dec, train.scale, config.seed)
    opt = [NadamState(a.shape, config.lr, config.beta1, config.beta2, config.eps) for a in params.arrays()]
    # The layer reading the flattened item grid sums n*K inputs, so a
    # sign-like Adam step moves its outputs ~n*K times further than elsewhere.
    opt[len(enc.conv_widths)].lr = config.lr * config.flatten_lr_scale
    return TrainState(config, params, train, validation, opt)


def run_epoch(state: TrainState, rng: np.random.Generator, targets: np.ndarray) -> float:
    """One pass over all users in shuffled batches; returns the cell-mean loss."""
    cfg = state.config
    train = state.train
    order = rng.permutation(train.m)
    k1 = train.k + 1
    total = 0.0
    arrays = state.params.arrays()
    for lo in range(0, train.m, cfg.batch_size):
        users = order[lo:lo + cfg.batch_size]
        t = targets[users]
        x = np.zeros(t.shape + (k1,))
        np.put_along_axis(x, t[..., None], 1.0, axis=-1)
        loss, grads = _loss_grad_dense(state.params, x, t, cfg.weight_decay)
        if not math.isfinite(loss):
            last = state.history[-1][1] if state.history else math.nan
            raise NumericalError(
                f"non-finite training loss in epoch {state.epoch + 1} (last finite epoch loss {last!r})"
            )
        total += loss * users.size
        for st, p, g in zip(state.opt, arrays, grads):
            nadam_step(st, p, g)
    return total / train.m


def train(config: TrainConfig, train: ObservedDataset,
          validation: ObservedDataset | None = None,
          on_block=None) -> TrainState:
    """Run blocks of epochs until the validation metric worsens or ``max_blocks``.

    ``on_block(state)`` is called after each snapshot, e.g. to write it out.
    """
    if train.N == 0:
        raise ValueError("cannot train on an empty dataset")
    state = new_state(config, train, validation)
    rng = make_rng(config.seed + 1)
    targets = train.index_matrix()
    worse = _worse(config.metric)
    for block in range(config.max_blocks):
        for _ in range(config.epoch_block):
            loss = run_epoch(state, rng, targets)
            state.epoch += 1
            val = _validation_loss(state.params, train, validation) if validation is not None else math.nan
            state.history.append((state.epoch, loss, val))
            _log.info("epoch %d train %.6f val %.6f", state.epoch, loss, val)
        metric = _block_metric(state)
        state.checkpoints.append(state.params.copy())
        state.block_metrics.append(metric)
        if on_block is not None:
            on_block(state)
        if math.isnan(metric):
            continue
        if len(state.block_metrics) >= 2 and worse(metric, state.block_metrics[-2]):
            state.stopped_early = True
            _log.info("validation %s worsened after block %d; stopping", config.metric, block + 1)
            break
    return state


def averaged_probs(checkpoints: Sequence[ModelParams], train: ObservedDataset,
                   users: Sequence[int]) -> np.ndarray:
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    acc = predict_users(checkpoints[0], train, users)
    for p in checkpoints[1:]:
        acc += predict_users(p, train, users)
    acc /= len(checkpoints)
    return acc


def averaged_predict(state: TrainState, user: int) -> ForwardOutput:
    """Checkpoint-averaged prediction for one user."""
    probs = averaged_probs(state.checkpoints, state.train, [user])[0]
    return outputs_from_probs(probs, state.scale)


def write_history(path: str | Path, history: Sequence[tuple[int, float, float]]) -> None:
    with Path(path).open("w") as fh:
        fh.write("epoch\ttrain_loss\tvalidation_loss\n")
        for epoch, tr, va in history:
            fh.write(f"{epoch}\t{tr!r}\t{va!r}\n")
