"""Checkpoint format: text manifest plus one little-endian float32 blob.

A checkpoint is a directory holding ``manifest.txt`` and ``params.bin``.
The manifest's first line is the ModelConfig as JSON; every following
line is ``name<TAB>dim dim ...<TAB>byte_offset``. The blob concatenates
all tensors as '<f4' in manifest order. Optimizer moments ride along as
``adam_m.*`` / ``adam_v.*`` tensors plus a scalar ``adam_step``.
"""

import json
import os

import numpy as np

from kgpath.errors import CheckpointError
from kgpath.model import LayerParams, ModelConfig, Parameters

MANIFEST = "manifest.txt"
BLOB = "params.bin"


def _expected_shapes(config):
    h, f, v = config.hidden, config.ff_inner, config.vocab_size
    shapes = {
        "token_embeddings": (v, h),
        "position_embeddings": (config.max_len, h),
        "final_ln_g": (h,),
        "final_ln_b": (h,),
        "output_bias": (v,),
    }
    for i in range(config.n_layers):
        shapes.update({
            f"layer{i}.wq": (h, h), f"layer{i}.wk": (h, h),
            f"layer{i}.wv": (h, h), f"layer{i}.wo": (h, h),
            f"layer{i}.w1": (h, f), f"layer{i}.b1": (f,),
            f"layer{i}.w2": (f, h), f"layer{i}.b2": (h,),
            f"layer{i}.ln1_g": (h,), f"layer{i}.ln1_b": (h,),
            f"layer{i}.ln2_g": (h,), f"layer{i}.ln2_b": (h,),
        })
    return shapes


def save_checkpoint(params, optimizer_state, config, path):
    """Write params (and optionally Adam state) under the directory `path`."""
    os.makedirs(path, exist_ok=True)
    entries = [(name, arr) for name, arr in params.tensors()]
    if optimizer_state is not None:
        # moments follow the canonical tensor order regardless of how the
        # state dicts were built, so identical states serialize identically
        entries.append(("adam_step", np.asarray(float(optimizer_state.step))))
        for name, _ in params.tensors():
            entries.append((f"adam_m.{name}", optimizer_state.m[name]))
        for name, _ in params.tensors():
            entries.append((f"adam_v.{name}", optimizer_state.v[name]))

    lines = [json.dumps(config.to_dict(), sort_keys=True)]
    offset = 0
    blobs = []
    for name, arr in entries:
        a = np.ascontiguousarray(arr, dtype="<f4")
        dims = " ".join(str(d) for d in a.shape) if a.ndim else "scalar"
        lines.append(f"{name}\t{dims}\t{offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(path, BLOB), "wb") as f:
        for b in blobs:
            f.write(b)


def _parse_manifest(path):
    manifest = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest):
        raise CheckpointError(f"missing manifest: {manifest}")
    with open(manifest, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().split("\n") if ln]
    try:
        config = ModelConfig.from_dict(json.loads(lines[0]))
    except (json.JSONDecodeError, TypeError, IndexError) as exc:
        raise CheckpointError(f"bad config header in {manifest}: {exc}") from None
    entries = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"malformed manifest line: {ln!r}")
        name, dims, offset = parts
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split())
        entries.append((name, shape, int(offset)))
    return config, entries


def load_checkpoint(path):
    """Returns (params, optimizer_state_or_None, config); validates shapes."""
    from kgpath.trainer import OptimizerState  # avoid a module cycle

    config, entries = _parse_manifest(path)
    blob_path = os.path.join(path, BLOB)
    if not os.path.exists(blob_path):
        raise CheckpointError(f"missing blob: {blob_path}")
    blob = np.fromfile(blob_path, dtype="<f4")

    expected = _expected_shapes(config)
    seen = {}
    for name, shape, offset in entries:
        base = name
        for prefix in ("adam_m.", "adam_v."):
            if name.startswith(prefix):
                base = name[len(prefix):]
        if base != "adam_step":
            if base not in expected:
                raise CheckpointError(f"unexpected tensor in manifest: {name}")
            if shape != expected[base]:
                raise CheckpointError(
                    f"shape mismatch for {name}: manifest {shape}, "
                    f"config expects {expected[base]}"
                )
        lo = offset // 4
        n = int(np.prod(shape)) if shape else 1
        if offset % 4 or lo + n > blob.size:
            raise CheckpointError(f"blob truncated or misaligned at tensor {name}")
        seen[name] = blob[lo:lo + n].reshape(shape).copy()

    missing = [n for n in expected if n not in seen]
    if missing:
        raise CheckpointError(f"manifest missing tensors: {missing[:3]}")

    layers = []
    for i in range(config.n_layers):
        layers.append(LayerParams(**{
            f: seen[f"layer{i}.{f}"]
            for f in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                      "ln1_g", "ln1_b", "ln2_g", "ln2_b")
        }))
    params = Parameters(
        token_embeddings=seen["token_embeddings"],
        position_embeddings=seen["position_embeddings"],
        layers=layers,
        final_ln_g=seen["final_ln_g"],
        final_ln_b=seen["final_ln_b"],
        output_bias=seen["output_bias"],
    )

    state = None
    if "adam_step" in seen:
        m = {k: seen[f"adam_m.{k}"] for k in expected if f"adam_m.{k}" in seen}
        v = {k: seen[f"adam_v.{k}"] for k in expected if f"adam_v.{k}" in seen}
        if set(m) != set(expected) or set(v) != set(expected):
            raise CheckpointError("optimizer state is incomplete")
        state = OptimizerState(step=int(np.ravel(seen["adam_step"])[0]), m=m, v=v)
    return params, state, config
