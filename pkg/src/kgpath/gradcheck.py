"""Central finite-difference verification of the analytic backward pass.

The check runs in float64: float32 forward noise would swamp the
1e-4 tolerance through the difference quotient, and the backward code
is dtype-generic so the same path is exercised either way. Dropout
masks are drawn once and replayed for every perturbed evaluation.
"""

from dataclasses import dataclass

import numpy as np

from kgpath.model import (
    ENTITY,
    RELATION,
    backward_batch,
    forward_batch,
    init_parameters,
    output_logits,
    softmax_cross_entropy,
    zeros_like,
)
from kgpath.vocab import MASK_ID


@dataclass
class CheckBatch:
    tokens: np.ndarray
    lengths: np.ndarray
    mask_positions: np.ndarray
    labels_local: np.ndarray
    target_class: str
    dropout_masks: list


@dataclass
class GradCheckReport:
    per_tensor: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.per_tensor.values())

    @property
    def worst_tensor(self):
        return max(self.per_tensor, key=self.per_tensor.get)

    @property
    def passed(self):
        return all(v <= self.tolerance for v in self.per_tensor.values())

    def failing_tensors(self):
        return sorted(
            (name for name, v in self.per_tensor.items() if v > self.tolerance),
            key=lambda n: -self.per_tensor[n],
        )


def build_check_batches(config, seed, batch_size=3):
    """Two small batches covering both target classes and both lengths."""
    rng = np.random.default_rng(seed)
    elo, ehi = config.entity_range
    rlo, rhi = config.relation_range
    batches = []
    for target_class in (ENTITY, RELATION):
        tokens = np.zeros((batch_size, config.max_len), dtype=np.int64)
        lengths = np.empty(batch_size, dtype=np.int64)
        maskpos = np.empty(batch_size, dtype=np.int64)
        labels = np.empty(batch_size, dtype=np.int64)
        for b in range(batch_size):
            length = int(rng.integers(3, config.max_len + 1))
            tokens[b, 0] = rng.integers(elo, ehi)
            tokens[b, 1] = rng.integers(elo, ehi)
            for p in range(2, length):
                tokens[b, p] = rng.integers(rlo, rhi)
            if target_class == ENTITY:
                pos = int(rng.integers(0, 2))
            else:
                pos = int(rng.integers(2, length))
            labels[b] = tokens[b, pos] - (elo if target_class == ENTITY else rlo)
            tokens[b, pos] = MASK_ID
            lengths[b] = length
            maskpos[b] = pos
        batches.append(CheckBatch(tokens, lengths, maskpos, labels, target_class, []))
    return batches


def _batch_loss(params, config, batch):
    trace = forward_batch(
        params, config, batch.tokens, batch.lengths, batch.mask_positions,
        train_mode=bool(batch.dropout_masks), dropout_masks=batch.dropout_masks or None,
    )
    logits = output_logits(params, config, trace, batch.target_class)
    value, _ = softmax_cross_entropy(logits, batch.labels_local)
    return value, trace, logits


def total_loss(params, config, batches):
    return sum(_batch_loss(params, config, batch)[0] for batch in batches)


def analytic_gradients(params, config, batches):
    grads = zeros_like(params)
    gdict = grads.tensor_dict()
    for batch in batches:
        _, trace, logits = _batch_loss(params, config, batch)
        _, dlogits = softmax_cross_entropy(logits, batch.labels_local)
        bg = backward_batch(params, config, trace, dlogits, batch.target_class)
        for name, arr in bg.tensors():
            gdict[name] += arr
    return grads


def fd_gradients(params, config, batches, step):
    """Central differences over every coordinate of every tensor."""
    grads = zeros_like(params)
    gdict = grads.tensor_dict()
    for name, arr in params.tensors():
        out = gdict[name]
        flat = arr.reshape(-1)
        oflat = out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = total_loss(params, config, batches)
            flat[i] = orig - step
            dn = total_loss(params, config, batches)
            flat[i] = orig
            oflat[i] = (up - dn) / (2.0 * step)
    return grads


def max_relative_errors(analytic, numeric):
    """Per-tensor max of |a - n| / max(|a|, |n|, 1e-8)."""
    report = {}
    nd = numeric.tensor_dict()
    for name, a in analytic.tensors():
        n = nd[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        report[name] = float((np.abs(a - n) / denom).max())
    return report


def _generic_point(params, rng):
    """Re-draw all tensors at O(1) scale.

    Training-style 0.02-std init leaves attention-projection gradients
    near 1e-10, where finite-difference roundoff dominates any tolerance
    worth asserting. The check perturbs a generic point instead: layer
    norm gains sit near 1, everything else is N(0, 0.4).
    """
    for name, arr in params.tensors():
        if name.endswith("ln1_g") or name.endswith("ln2_g") or name.endswith("final_ln_g"):
            arr[:] = 1.0 + 0.2 * rng.standard_normal(arr.shape)
        else:
            arr[:] = 0.4 * rng.standard_normal(arr.shape)
    return params


def gradient_check(config, seed, step, tolerance):
    """Compare analytic vs finite-difference gradients on a fresh model.

    Returns a GradCheckReport; callers decide what to do with failures.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    params = _generic_point(init_parameters(config, seed, dtype=np.float64),
                            np.random.default_rng(seed))
    batches = build_check_batches(config, seed)
    if config.dropout_rate > 0:
        rng = np.random.default_rng(seed + 1)
        for batch in batches:
            trace = forward_batch(
                params, config, batch.tokens, batch.lengths, batch.mask_positions,
                train_mode=True, rng=rng,
            )
            batch.dropout_masks = trace.dropout_masks
    analytic = analytic_gradients(params, config, batches)
    numeric = fd_gradients(params, config, batches, step)
    return GradCheckReport(max_relative_errors(analytic, numeric), tolerance)
