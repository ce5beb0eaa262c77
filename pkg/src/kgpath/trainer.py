"""Masked-sample construction, Adam with warmup/decay, training loops.

Per-epoch randomness (mask side, shuffle order, dropout) is derived
from (seed, salt, epoch, batch) SeedSequences, never from a running RNG
state, so a run resumed from a mid-training checkpoint replays the
exact step stream of an uninterrupted run.
"""

import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from kgpath._backend import HAS_NUMBA, use_numba
from kgpath.checkpoint import save_checkpoint
from kgpath.errors import DivergenceError, NumericError, TaskError
from kgpath.model import (
    ENTITY,
    RELATION,
    backward_batch,
    forward_batch,
    output_logits,
    softmax_cross_entropy,
)
from kgpath.vocab import MASK_ID, PAD_ID

PRETRAIN = "pretrain"
LINK = "link"
RELATION_TASK = "relation"
TASKS = (PRETRAIN, LINK, RELATION_TASK)

# salts for the per-epoch seed derivations
_S_MASK, _S_SHUFFLE, _S_DROPOUT = 11, 13, 17


@dataclass
class TrainConfig:
    batch_size: int = 512
    epochs: int = 800
    learning_rate: float = 5e-4
    warmup_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    label_smoothing: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class OptimizerState:
    step: int
    m: dict
    v: dict


def init_optimizer(params):
    names = dict(params.tensors())
    return OptimizerState(
        step=0,
        m={k: np.zeros_like(a) for k, a in names.items()},
        v={k: np.zeros_like(a) for k, a in names.items()},
    )


def learning_rate_at(step, total_steps, config):
    """Linear warmup to the configured rate, then linear decay to zero.

    `step` is 1-based; the rate equals learning_rate exactly at the
    warmup boundary.
    """
    warmup = int(config.warmup_fraction * total_steps)
    if warmup > 0 and step <= warmup:
        return config.learning_rate * step / warmup
    denom = max(total_steps - warmup, 1)
    return config.learning_rate * max(total_steps - step, 0) / denom


# ---------------------------------------------------------------------------
# fused Adam update kernels

def _adam_numpy(p, g, m, v, scale, lr, beta1, omb1, beta2, omb2, bc1, bc2, eps):
    gs = g * scale
    m[:] = beta1 * m + omb1 * gs
    v[:] = beta2 * v + omb2 * (gs * gs)
    p[:] = p - lr * (m * bc1) / (np.sqrt(v * bc2) + eps)


if HAS_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _adam_numba(p, g, m, v, scale, lr, beta1, omb1, beta2, omb2, bc1, bc2, eps):
        for i in range(p.size):
            gs = g[i] * scale
            m[i] = beta1 * m[i] + omb1 * gs
            v[i] = beta2 * v[i] + omb2 * (gs * gs)
            p[i] = p[i] - lr * (m[i] * bc1) / (np.sqrt(v[i] * bc2) + eps)
else:  # pragma: no cover
    _adam_numba = _adam_numpy


def adam_step(params, grads, state, config, total_steps):
    """One bias-corrected adaptive-moment update at the scheduled rate.

    Gradients are first rescaled by the global-norm clip. Mutates params
    and state in place and returns them.
    """
    t = state.step + 1
    lr64 = learning_rate_at(t, total_steps, config)

    sq = 0.0
    if config.clip_norm and config.clip_norm > 0:
        for _, g in grads.tensors():
            sq += float(np.sum(g.astype(np.float64) ** 2))
        gnorm = math.sqrt(sq)
        scale64 = config.clip_norm / gnorm if gnorm > config.clip_norm else 1.0
    else:
        scale64 = 1.0

    dt = params.dtype.type
    beta1, beta2 = config.adam_beta1, config.adam_beta2
    args = (
        dt(scale64), dt(lr64), dt(beta1), dt(1.0 - beta1), dt(beta2),
        dt(1.0 - beta2), dt(1.0 / (1.0 - beta1 ** t)), dt(1.0 / (1.0 - beta2 ** t)),
        dt(config.adam_epsilon),
    )
    kernel = _adam_numba if use_numba() else _adam_numpy
    gdict = dict(grads.tensors())
    for name, p in params.tensors():
        kernel(p.reshape(-1), gdict[name].reshape(-1),
               state.m[name].reshape(-1), state.v[name].reshape(-1), *args)
    state.step = t
    return params, state


# ---------------------------------------------------------------------------
# masked-sample pools

class Records(NamedTuple):
    """Normalized record set: (n3, 3) triple ids and (n4, 4) quadruple ids."""

    triples: np.ndarray
    quadruples: np.ndarray

    @property
    def total(self):
        return len(self.triples) + len(self.quadruples)


def normalize_records(records):
    """Accepts a Records pair, an (N, 3) / (N, 4) array, or a mixed list."""
    if isinstance(records, Records):
        return records
    if isinstance(records, np.ndarray):
        if records.ndim != 2 or records.shape[1] not in (3, 4):
            raise TaskError("record array must be (N, 3) or (N, 4)")
        empty3 = np.empty((0, 3), dtype=np.int32)
        empty4 = np.empty((0, 4), dtype=np.int32)
        if records.shape[1] == 3:
            return Records(records.astype(np.int32, copy=False), empty4)
        return Records(empty3, records.astype(np.int32, copy=False))
    t3, t4 = [], []
    for rec in records:
        if len(rec) == 3:
            t3.append(tuple(rec))
        elif len(rec) == 4:
            t4.append(tuple(rec))
        else:
            raise TaskError(f"record of arity {len(rec)} is neither triple nor quadruple")
    a3 = np.asarray(t3, dtype=np.int32).reshape(len(t3), 3)
    a4 = np.asarray(t4, dtype=np.int32).reshape(len(t4), 4)
    return Records(a3, a4)


@dataclass
class TrainingPool:
    """Fixed-length masked samples ready for batching.

    labels hold vocabulary token ids; the training step converts them to
    local indices within the target range.
    """

    tokens: np.ndarray
    lengths: np.ndarray
    mask_positions: np.ndarray
    labels: np.ndarray
    target_class: str

    def __len__(self):
        return len(self.tokens)


def _layout(recs):
    """Unified input layout [h, t, r1(, r2)] with PAD at the unused slot."""
    n3, n4 = len(recs.triples), len(recs.quadruples)
    n = n3 + n4
    tokens = np.full((n, 4), PAD_ID, dtype=np.int32)
    lengths = np.empty(n, dtype=np.int64)
    if n3:
        tokens[:n3, 0] = recs.triples[:, 0]
        tokens[:n3, 1] = recs.triples[:, 2]
        tokens[:n3, 2] = recs.triples[:, 1]
        lengths[:n3] = 3
    if n4:
        tokens[n3:, 0] = recs.quadruples[:, 0]
        tokens[n3:, 1] = recs.quadruples[:, 3]
        tokens[n3:, 2] = recs.quadruples[:, 1]
        tokens[n3:, 3] = recs.quadruples[:, 2]
        lengths[n3:] = 4
    return tokens, lengths


def build_masked_samples(records, task, seed=0):
    """Masked training samples for one pass.

    pretrain: one sample per record, head or tail masked uniformly
    (seeded). link: head- and tail-masked samples per triple. relation:
    one relation-masked sample per triple. Finetuning tasks reject
    quadruples.
    """
    if task not in TASKS:
        raise TaskError(f"unknown task: {task!r}")
    recs = normalize_records(records)

    if task == PRETRAIN:
        tokens, lengths = _layout(recs)
        n = len(tokens)
        rng = np.random.default_rng(seed)
        side = rng.integers(0, 2, size=n)  # 0 -> mask head, 1 -> mask tail
        labels = np.where(side == 0, tokens[:, 0], tokens[:, 1]).astype(np.int32)
        tokens[np.arange(n), side] = MASK_ID
        return TrainingPool(tokens, lengths, side.astype(np.int64), labels, ENTITY)

    if len(recs.quadruples):
        raise TaskError(f"{task} finetuning operates on triples only")
    trip = recs.triples
    n = len(trip)

    if task == LINK:
        tokens = np.full((2 * n, 4), PAD_ID, dtype=np.int32)
        tokens[0::2, 0] = MASK_ID
        tokens[0::2, 1] = trip[:, 2]
        tokens[0::2, 2] = trip[:, 1]
        tokens[1::2, 0] = trip[:, 0]
        tokens[1::2, 1] = MASK_ID
        tokens[1::2, 2] = trip[:, 1]
        lengths = np.full(2 * n, 3, dtype=np.int64)
        maskpos = np.zeros(2 * n, dtype=np.int64)
        maskpos[1::2] = 1
        labels = np.empty(2 * n, dtype=np.int32)
        labels[0::2] = trip[:, 0]
        labels[1::2] = trip[:, 2]
        return TrainingPool(tokens, lengths, maskpos, labels, ENTITY)

    tokens = np.full((n, 4), PAD_ID, dtype=np.int32)
    tokens[:, 0] = trip[:, 0]
    tokens[:, 1] = trip[:, 2]
    tokens[:, 2] = MASK_ID
    lengths = np.full(n, 3, dtype=np.int64)
    maskpos = np.full(n, 2, dtype=np.int64)
    labels = trip[:, 1].astype(np.int32)
    return TrainingPool(tokens, lengths, maskpos, labels, RELATION)


# ---------------------------------------------------------------------------
# training loops

class TrainResult(NamedTuple):
    params: "Parameters"
    losses: list  # (epoch, mean_loss, last_lr) per epoch
    optimizer_state: OptimizerState


def _seed_rng(*entropy):
    return np.random.default_rng(np.random.SeedSequence([e & 0xFFFFFFFF for e in entropy]))


def _append_log(log_path, epoch, mean_loss, lr):
    if log_path is None:
        return
    with open(log_path, "a", encoding="utf-8") as f:
        f.write(f"{epoch}\t{mean_loss:.8e}\t{lr:.8e}\n")


def _run_training(params, model_config, recs, task, config, *,
                  log_path=None, checkpoint_dir=None, checkpoint_every=0,
                  optimizer_state=None, start_epoch=0, on_epoch=None):
    if recs.total == 0:
        raise TaskError("training pool is empty")
    static_pool = build_masked_samples(recs, task) if task != PRETRAIN else None
    n = recs.total if task == PRETRAIN else len(static_pool)
    batch = config.batch_size
    steps_per_epoch = (n + batch - 1) // batch
    total_steps = config.epochs * steps_per_epoch

    state = optimizer_state if optimizer_state is not None else init_optimizer(params)
    lo, _ = model_config.target_range(
        ENTITY if task in (PRETRAIN, LINK) else RELATION)
    losses = []
    last_ckpt = None

    for epoch in range(start_epoch, config.epochs):
        if task == PRETRAIN:
            pool = build_masked_samples(
                recs, PRETRAIN,
                seed=np.random.SeedSequence([config.seed & 0xFFFFFFFF, _S_MASK, epoch]),
            )
        else:
            pool = static_pool
        order = _seed_rng(config.seed, _S_SHUFFLE, epoch).permutation(n)

        epoch_loss = 0.0
        for bi in range(steps_per_epoch):
            idx = order[bi * batch:(bi + 1) * batch]
            drop_rng = _seed_rng(config.seed, _S_DROPOUT, epoch, bi)
            try:
                trace = forward_batch(
                    params, model_config, pool.tokens[idx], pool.lengths[idx],
                    pool.mask_positions[idx], train_mode=True, rng=drop_rng,
                )
                logits = output_logits(params, model_config, trace, pool.target_class)
                step_loss, dlogits = softmax_cross_entropy(
                    logits, pool.labels[idx].astype(np.int64) - lo,
                    config.label_smoothing,
                )
                if not math.isfinite(step_loss):
                    raise NumericError("non-finite loss")
                grads = backward_batch(params, model_config, trace, dlogits,
                                       pool.target_class)
            except NumericError as exc:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: {exc}", last_ckpt
                ) from exc
            adam_step(params, grads, state, config, total_steps)
            epoch_loss += step_loss * len(idx)

        mean_loss = epoch_loss / n
        lr = learning_rate_at(state.step, total_steps, config)
        losses.append((epoch, mean_loss, lr))
        _append_log(log_path, epoch, mean_loss, lr)

        if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            last_ckpt = os.path.join(str(checkpoint_dir), f"epoch_{epoch + 1:05d}")
            save_checkpoint(params, state, model_config, last_ckpt)
        if on_epoch is not None and on_epoch(epoch, params):
            break

    return TrainResult(params, losses, state)


def pretrain(params, model_config, records, config, **kwargs):
    """Masked-entity pre-training over triples plus sampled quadruples."""
    return _run_training(params, model_config, normalize_records(records),
                         PRETRAIN, config, **kwargs)


def finetune(params, model_config, triples, task, config, *,
             valid_triples=None, filter_index=None, eval_every=10,
             patience=10, **kwargs):
    """Link or relation finetuning; pass a fresh params for the
    no-pretraining ablation arm.

    With valid_triples and filter_index given, validation MRR is
    computed every eval_every epochs and training stops after
    `patience` evaluations without improvement, returning the best
    parameters seen.
    """
    if task not in (LINK, RELATION_TASK):
        raise TaskError(f"finetune task must be link or relation, got {task!r}")
    recs = normalize_records(triples)
    if len(recs.quadruples):
        raise TaskError("finetuning operates on triples only")

    if valid_triples is None:
        return _run_training(params, model_config, recs, task, config, **kwargs)

    from kgpath import evaluator  # local import; evaluator depends on model only

    best = {"mrr": -1.0, "params": None, "stale": 0}

    def on_epoch(epoch, cur_params):
        if (epoch + 1) % eval_every:
            return False
        if task == LINK:
            metrics = evaluator.evaluate_link_prediction(
                cur_params, model_config, valid_triples, filter_index)
        else:
            metrics = evaluator.evaluate_relation_prediction(
                cur_params, model_config, valid_triples, filter_index)
        if metrics.mrr > best["mrr"]:
            best["mrr"] = metrics.mrr
            best["params"] = cur_params.copy()
            best["stale"] = 0
        else:
            best["stale"] += 1
        return best["stale"] >= patience

    result = _run_training(params, model_config, recs, task, config,
                           on_epoch=on_epoch, **kwargs)
    if best["params"] is not None:
        return TrainResult(best["params"], result.losses, result.optimizer_state)
    return result
