"""Transformer encoder over length-<=4 token sequences, in plain numpy.

Forward returns a full activation trace; backward consumes it and
produces exact analytic gradients for every parameter, including the
two roles of the tied token-embedding matrix (input lookup and output
projection). Matmuls dominate the cost and go through BLAS, so these
paths are deliberately not numba kernels.

Blocks are post-layer-norm: attention then feed-forward, each followed
by add-and-normalize, GELU inside the feed-forward, and one extra layer
norm after the final block. PAD keys are excluded from attention with
an additive -inf mask, which makes hidden states bit-independent of PAD
token content.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import erf

from kgpath.errors import NumericError
from kgpath.vocab import MASK_ID, N_SPECIAL

MAX_LEN = 4
LN_EPS = 1e-5
INIT_STD = 0.02

ENTITY = "entity"
RELATION = "relation"


@dataclass(frozen=True)
class ModelConfig:
    n_entities: int
    n_relations: int
    n_layers: int = 6
    n_heads: int = 4
    hidden: int = 256
    ff_inner: int = 0  # 0 -> 4 * hidden
    max_len: int = MAX_LEN
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")
        if self.max_len != MAX_LEN:
            raise ValueError(f"max_len is fixed at {MAX_LEN}")
        if self.ff_inner == 0:
            object.__setattr__(self, "ff_inner", 4 * self.hidden)

    @property
    def vocab_size(self):
        return N_SPECIAL + self.n_entities + self.n_relations

    @property
    def entity_range(self):
        return N_SPECIAL, N_SPECIAL + self.n_entities

    @property
    def relation_range(self):
        lo = N_SPECIAL + self.n_entities
        return lo, lo + self.n_relations

    def target_range(self, target_class):
        if target_class == ENTITY:
            return self.entity_range
        if target_class == RELATION:
            return self.relation_range
        raise ValueError(f"unknown target class: {target_class!r}")

    def to_dict(self):
        return {
            "n_entities": self.n_entities,
            "n_relations": self.n_relations,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "hidden": self.hidden,
            "ff_inner": self.ff_inner,
            "max_len": self.max_len,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class Parameters:
    """All trainable tensors; entity rows of token_embeddings double as
    the output projection (tied weights)."""

    token_embeddings: np.ndarray
    position_embeddings: np.ndarray
    layers: list
    final_ln_g: np.ndarray
    final_ln_b: np.ndarray
    output_bias: np.ndarray

    def tensors(self):
        """(name, array) pairs in canonical manifest order."""
        yield "token_embeddings", self.token_embeddings
        yield "position_embeddings", self.position_embeddings
        for i, lp in enumerate(self.layers):
            for fname in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                          "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                yield f"layer{i}.{fname}", getattr(lp, fname)
        yield "final_ln_g", self.final_ln_g
        yield "final_ln_b", self.final_ln_b
        yield "output_bias", self.output_bias

    def tensor_dict(self):
        return dict(self.tensors())

    def set_tensor(self, name, value):
        if name.startswith("layer"):
            idx, fname = name[5:].split(".")
            setattr(self.layers[int(idx)], fname, value)
        else:
            setattr(self, name, value)

    @property
    def dtype(self):
        return self.token_embeddings.dtype

    def astype(self, dtype):
        out = zeros_like(self)
        for name, arr in self.tensors():
            out.set_tensor(name, arr.astype(dtype))
        return out

    def copy(self):
        return self.astype(self.dtype)


def zeros_like(params):
    layers = [
        LayerParams(**{f: np.zeros_like(getattr(lp, f))
                       for f in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                                 "ln1_g", "ln1_b", "ln2_g", "ln2_b")})
        for lp in params.layers
    ]
    return Parameters(
        token_embeddings=np.zeros_like(params.token_embeddings),
        position_embeddings=np.zeros_like(params.position_embeddings),
        layers=layers,
        final_ln_g=np.zeros_like(params.final_ln_g),
        final_ln_b=np.zeros_like(params.final_ln_b),
        output_bias=np.zeros_like(params.output_bias),
    )


def _trunc_normal(rng, shape, std, dtype):
    # resample anything beyond 2 sigma
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


def init_parameters(config, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    h, f = config.hidden, config.ff_inner

    def tn(*shape):
        return _trunc_normal(rng, shape, INIT_STD, dtype)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            wq=tn(h, h), wk=tn(h, h), wv=tn(h, h), wo=tn(h, h),
            w1=tn(h, f), b1=np.zeros(f, dtype=dtype),
            w2=tn(f, h), b2=np.zeros(h, dtype=dtype),
            ln1_g=np.ones(h, dtype=dtype), ln1_b=np.zeros(h, dtype=dtype),
            ln2_g=np.ones(h, dtype=dtype), ln2_b=np.zeros(h, dtype=dtype),
        ))
    return Parameters(
        token_embeddings=tn(config.vocab_size, h),
        position_embeddings=tn(config.max_len, h),
        layers=layers,
        final_ln_g=np.ones(h, dtype=dtype),
        final_ln_b=np.zeros(h, dtype=dtype),
        output_bias=np.zeros(config.vocab_size, dtype=dtype),
    )


class MaskedSample(NamedTuple):
    """One masked input: PAD-padded tokens, true length, masked slot, gold id."""

    tokens: np.ndarray
    length: int
    mask_position: int
    label: int


def validate_sample(sample, config):
    tokens = np.asarray(sample.tokens)
    if tokens.shape != (config.max_len,):
        raise ValueError("tokens must have max_len entries")
    if not 3 <= sample.length <= config.max_len:
        raise ValueError("length must be 3 or 4")
    if not 0 <= sample.mask_position < sample.length:
        raise ValueError("mask position outside the sequence")
    if tokens[sample.mask_position] != MASK_ID:
        raise ValueError("masked slot must hold the MASK token")
    elo, ehi = config.entity_range
    rlo, rhi = config.relation_range
    if sample.mask_position < 2:
        if not elo <= sample.label < ehi:
            raise ValueError("entity slot masked but label is not an entity id")
    else:
        if not rlo <= sample.label < rhi:
            raise ValueError("relation slot masked but label is not a relation id")


# ---------------------------------------------------------------------------
# forward

@dataclass
class LayerTrace:
    x_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    attn_drop: np.ndarray
    ctx: np.ndarray
    resid1_drop: np.ndarray
    xhat1: np.ndarray
    inv_std1: np.ndarray
    x_mid: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    phi1: np.ndarray
    resid2_drop: np.ndarray
    xhat2: np.ndarray
    inv_std2: np.ndarray
    x_out: np.ndarray


@dataclass
class ForwardTrace:
    """Everything backward needs, including the dropout masks to replay."""

    tokens: np.ndarray
    lengths: np.ndarray
    mask_positions: np.ndarray
    train_mode: bool
    emb_drop: np.ndarray
    key_bias: np.ndarray
    layers: list
    xhat_f: np.ndarray
    inv_std_f: np.ndarray
    final_out: np.ndarray
    hidden: np.ndarray  # (B, H) state at the masked slot

    @property
    def dropout_masks(self):
        masks = [self.emb_drop]
        for lt in self.layers:
            masks.extend([lt.attn_drop, lt.resid1_drop, lt.resid2_drop])
        return masks


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(LN_EPS, dtype=x.dtype))
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std


def _layer_norm_backward(dy, xhat, inv_std, gain):
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu(z):
    dtype = z.dtype
    phi = 0.5 * (1.0 + erf(z * np.asarray(1.0 / np.sqrt(2.0), dtype=dtype)))
    return z * phi, phi


def _gelu_backward(dz_out, z, phi):
    dtype = z.dtype
    pdf = np.exp(-0.5 * z * z) * np.asarray(1.0 / np.sqrt(2.0 * np.pi), dtype=dtype)
    return dz_out * (phi + z * pdf)


def _split_heads(x, n_heads):
    b, l, h = x.shape
    return x.reshape(b, l, n_heads, h // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, nh, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, nh * dh)


def _draw_dropout_masks(config, rng, batch, dtype):
    """One mask per dropout site, scaled by 1/keep (inverted dropout)."""
    p = config.dropout_rate
    if p <= 0.0:
        return None
    keep = 1.0 - p
    l, h, nh = config.max_len, config.hidden, config.n_heads

    def mask(shape):
        return (rng.random(shape) < keep).astype(dtype) / np.asarray(keep, dtype=dtype)

    masks = [mask((batch, l, h))]
    for _ in range(config.n_layers):
        masks.append(mask((batch, nh, l, l)))
        masks.append(mask((batch, l, h)))
        masks.append(mask((batch, l, h)))
    return masks


def forward_batch(params, config, tokens, lengths, mask_positions,
                  train_mode=False, rng=None, dropout_masks=None):
    """Run the encoder over a batch; returns the full ForwardTrace.

    Dropout is active only in train_mode; pass dropout_masks to replay a
    previous draw (used by the finite-difference checker), otherwise
    masks are drawn from rng.
    """
    dtype = params.dtype
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    mask_positions = np.asarray(mask_positions, dtype=np.int64)
    b, l = tokens.shape
    nh = config.n_heads
    scale = np.asarray(1.0 / np.sqrt(config.hidden // nh), dtype=dtype)

    if train_mode and dropout_masks is None:
        if rng is None:
            rng = np.random.default_rng(0)
        dropout_masks = _draw_dropout_masks(config, rng, b, dtype)
    if not train_mode:
        dropout_masks = None
    masks = iter(dropout_masks) if dropout_masks is not None else None

    def next_mask():
        return next(masks) if masks is not None else None

    def dropped(x, m):
        return x if m is None else x * m

    # additive key mask: 0 where the key is a real token, -inf at PAD
    valid = np.arange(l)[None, :] < lengths[:, None]
    key_bias = np.where(valid, 0.0, -np.inf).astype(dtype)[:, None, None, :]

    x = params.token_embeddings[tokens] + params.position_embeddings[None, :, :]
    emb_drop = next_mask()
    x = dropped(x, emb_drop)

    layer_traces = []
    for i, lp in enumerate(params.layers):
        x_in = x
        q = _split_heads(x_in @ lp.wq, nh)
        k = _split_heads(x_in @ lp.wk, nh)
        v = _split_heads(x_in @ lp.wv, nh)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + key_bias
        smax = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - smax)
        probs = e / e.sum(axis=-1, keepdims=True)
        attn_drop = next_mask()
        ctx = _merge_heads(dropped(probs, attn_drop) @ v)
        attn_out = ctx @ lp.wo
        resid1_drop = next_mask()
        add1 = x_in + dropped(attn_out, resid1_drop)
        x_mid, xhat1, inv_std1 = _layer_norm(add1, lp.ln1_g, lp.ln1_b)

        z1 = x_mid @ lp.w1 + lp.b1
        a1, phi1 = _gelu(z1)
        ffn_out = a1 @ lp.w2 + lp.b2
        resid2_drop = next_mask()
        add2 = x_mid + dropped(ffn_out, resid2_drop)
        x_out, xhat2, inv_std2 = _layer_norm(add2, lp.ln2_g, lp.ln2_b)

        if not np.isfinite(x_out).all():
            raise NumericError(f"non-finite activation in layer {i}")
        layer_traces.append(LayerTrace(
            x_in=x_in, q=q, k=k, v=v, probs=probs, attn_drop=attn_drop,
            ctx=ctx, resid1_drop=resid1_drop, xhat1=xhat1, inv_std1=inv_std1,
            x_mid=x_mid, z1=z1, a1=a1, phi1=phi1, resid2_drop=resid2_drop,
            xhat2=xhat2, inv_std2=inv_std2, x_out=x_out,
        ))
        x = x_out

    final_out, xhat_f, inv_std_f = _layer_norm(x, params.final_ln_g, params.final_ln_b)
    if not np.isfinite(final_out).all():
        raise NumericError("non-finite activation in final layer norm")
    hidden = final_out[np.arange(b), mask_positions]

    return ForwardTrace(
        tokens=tokens, lengths=lengths, mask_positions=mask_positions,
        train_mode=train_mode, emb_drop=emb_drop, key_bias=key_bias,
        layers=layer_traces, xhat_f=xhat_f, inv_std_f=inv_std_f,
        final_out=final_out, hidden=hidden,
    )


def forward(params, config, sample, train_mode=False, rng_seed=0):
    """Single-sample wrapper; see forward_batch."""
    validate_sample(sample, config)
    return forward_batch(
        params, config,
        np.asarray(sample.tokens, dtype=np.int64)[None, :],
        np.asarray([sample.length]),
        np.asarray([sample.mask_position]),
        train_mode=train_mode,
        rng=np.random.default_rng(rng_seed),
    )


def target_class_of(trace):
    """Entity for masked slots 0-1, relation for slot 2+; uniform per batch."""
    ent = trace.mask_positions < 2
    if ent.all():
        return ENTITY
    if (~ent).all():
        return RELATION
    raise ValueError("batch mixes entity-masked and relation-masked samples")


def output_logits(params, config, trace, target_class=None):
    """Scores over the target id range: tied-embedding product plus bias."""
    if target_class is None:
        target_class = target_class_of(trace)
    lo, hi = config.target_range(target_class)
    return trace.hidden @ params.token_embeddings[lo:hi].T + params.output_bias[lo:hi]


def softmax_cross_entropy(logits, labels, smoothing=0.0):
    """Mean cross-entropy and d(loss)/d(logits) for local label indices.

    The loss value is accumulated in float64; the gradient keeps the
    logits dtype. Label smoothing spreads `smoothing` uniformly over the
    whole candidate range.
    """
    b, r = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    gold = z[np.arange(b), labels]
    loss_i = lse - gold
    if smoothing > 0.0:
        loss_i = (1.0 - smoothing) * loss_i + smoothing * (lse - z.mean(axis=1))
    loss = float(loss_i.mean())

    zf = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(zf)
    dlogits = e / e.sum(axis=1, keepdims=True)
    if smoothing > 0.0:
        dlogits -= np.asarray(smoothing / r, dtype=logits.dtype)
        dlogits[np.arange(b), labels] -= np.asarray(1.0 - smoothing, dtype=logits.dtype)
    else:
        dlogits[np.arange(b), labels] -= np.asarray(1.0, dtype=logits.dtype)
    dlogits /= np.asarray(b, dtype=logits.dtype)
    return loss, dlogits


def loss(logits, label, smoothing=0.0):
    """Scalar cross-entropy for one sample's logits vector."""
    value, _ = softmax_cross_entropy(np.asarray(logits)[None, :], [label], smoothing)
    return value


# ---------------------------------------------------------------------------
# backward

def backward_batch(params, config, trace, dlogits, target_class=None):
    """Exact gradients of the batch loss w.r.t. every parameter tensor."""
    if target_class is None:
        target_class = target_class_of(trace)
    lo, hi = config.target_range(target_class)
    dtype = params.dtype
    b, l = trace.tokens.shape
    nh = config.n_heads
    scale = np.asarray(1.0 / np.sqrt(config.hidden // nh), dtype=dtype)

    grads = zeros_like(params)

    # output head (tied embeddings)
    grads.output_bias[lo:hi] = dlogits.sum(axis=0)
    grads.token_embeddings[lo:hi] += dlogits.T @ trace.hidden
    dhidden = dlogits @ params.token_embeddings[lo:hi]

    dfinal = np.zeros_like(trace.final_out)
    dfinal[np.arange(b), trace.mask_positions] = dhidden
    dx, dg, db = _layer_norm_backward(dfinal, trace.xhat_f, trace.inv_std_f,
                                      params.final_ln_g)
    grads.final_ln_g += dg
    grads.final_ln_b += db

    def dropped_back(d, m):
        return d if m is None else d * m

    for i in reversed(range(config.n_layers)):
        lp = params.layers[i]
        gp = grads.layers[i]
        lt = trace.layers[i]

        # ln2 <- add2 = x_mid + drop(ffn_out)
        dadd2, dg, db = _layer_norm_backward(dx, lt.xhat2, lt.inv_std2, lp.ln2_g)
        gp.ln2_g += dg
        gp.ln2_b += db
        dffn = dropped_back(dadd2, lt.resid2_drop)
        dx_mid = dadd2.copy()

        # ffn: a1 @ w2 + b2, a1 = gelu(z1), z1 = x_mid @ w1 + b1
        gp.w2 += lt.a1.reshape(-1, config.ff_inner).T @ dffn.reshape(-1, config.hidden)
        gp.b2 += dffn.sum(axis=(0, 1))
        da1 = dffn @ lp.w2.T
        dz1 = _gelu_backward(da1, lt.z1, lt.phi1)
        gp.w1 += lt.x_mid.reshape(-1, config.hidden).T @ dz1.reshape(-1, config.ff_inner)
        gp.b1 += dz1.sum(axis=(0, 1))
        dx_mid += dz1 @ lp.w1.T

        # ln1 <- add1 = x_in + drop(attn_out)
        dadd1, dg, db = _layer_norm_backward(dx_mid, lt.xhat1, lt.inv_std1, lp.ln1_g)
        gp.ln1_g += dg
        gp.ln1_b += db
        dattn_out = dropped_back(dadd1, lt.resid1_drop)
        dx_in = dadd1.copy()

        # attention output projection
        gp.wo += lt.ctx.reshape(-1, config.hidden).T @ dattn_out.reshape(-1, config.hidden)
        dctx = _split_heads(dattn_out @ lp.wo.T, nh)

        probs_used = lt.probs if lt.attn_drop is None else lt.probs * lt.attn_drop
        dprobs_used = dctx @ lt.v.transpose(0, 1, 3, 2)
        dv = probs_used.transpose(0, 1, 3, 2) @ dctx
        dprobs = dropped_back(dprobs_used, lt.attn_drop)
        dscores = lt.probs * (dprobs - (dprobs * lt.probs).sum(axis=-1, keepdims=True))
        dq = dscores @ lt.k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ lt.q * scale

        x_flat = lt.x_in.reshape(-1, config.hidden)
        for w, name, dhead in ((lp.wq, "wq", dq), (lp.wk, "wk", dk), (lp.wv, "wv", dv)):
            dmerged = _merge_heads(dhead)
            cur = getattr(gp, name)
            cur += x_flat.T @ dmerged.reshape(-1, config.hidden)
            dx_in += dmerged @ w.T

        dx = dx_in

    demb = dropped_back(dx, trace.emb_drop)
    grads.position_embeddings += demb.sum(axis=0)
    np.add.at(grads.token_embeddings, trace.tokens.reshape(-1),
              demb.reshape(-1, config.hidden))

    for name, g in grads.tensors():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    return grads


def backward(params, config, trace, label, smoothing=0.0):
    """Single-sample gradients of the Eq.-style masked cross-entropy."""
    target_class = target_class_of(trace)
    logits = output_logits(params, config, trace, target_class)
    lo, _ = config.target_range(target_class)
    _, dlogits = softmax_cross_entropy(logits, [label - lo], smoothing)
    return backward_batch(params, config, trace, dlogits, target_class)
