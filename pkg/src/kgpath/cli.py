"""Command-line pipeline: extract, pretrain, finetune, eval, dump-hidden,
gradcheck.

Every run writes a manifest.json (resolved configuration, input file
digests, seed, timestamps, output paths) into the --out directory.
Configuration precedence is built-in defaults < --config JSON file <
explicit command-line flags.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import fields as dataclass_fields

import numpy as np

from kgpath import evaluator, paths, trainer
from kgpath.checkpoint import load_checkpoint, save_checkpoint
from kgpath.errors import DivergenceError, KgPathError, ValidationError, VocabularyError
from kgpath.kg import build_filter_index, index_graph
from kgpath.model import ModelConfig, forward_batch, init_parameters
from kgpath.trainer import TrainConfig
from kgpath.vocab import MASK_ID, PAD_ID, build_vocabulary, encode_triples

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 3

MODEL_KEYS = ("n_layers", "n_heads", "hidden", "ff_inner", "dropout_rate")
TRAIN_KEYS = tuple(f.name for f in dataclass_fields(TrainConfig))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, subcommand, config, inputs, outputs, seed, started,
                    ended=None):
    """Echo the resolved run configuration; ended=None marks an in-progress
    run (training commands write the manifest at start and refresh it)."""
    manifest = {
        "subcommand": subcommand,
        "configuration": config,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)}
                   for name, p in inputs.items() if p},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "started_unix": started,
        "ended_unix": ended,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _merge_config(args, defaults):
    """defaults < config file < explicit CLI flags (flags default to None)."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in merged:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _split_config(merged):
    train_cfg = TrainConfig(**{k: merged[k] for k in TRAIN_KEYS})
    model_part = {k: merged[k] for k in MODEL_KEYS}
    return train_cfg, model_part


def _load_splits(args, require=("train",)):
    """Vocabulary over all provided splits, plus encoded triple arrays."""
    provided = {name: getattr(args, name, None) for name in ("train", "valid", "test")}
    for name in require:
        if not provided.get(name):
            raise ValidationError(f"--{name} is required for this command")
    vocab = build_vocabulary([p for p in provided.values() if p])
    arrays = {
        name: encode_triples(p, vocab) if p else None
        for name, p in provided.items()
    }
    return vocab, arrays, provided


def _check_vocab(config, vocab):
    if (config.n_entities, config.n_relations) != (vocab.n_entities, vocab.n_relations):
        raise VocabularyError(
            f"checkpoint was built for {config.n_entities} entities / "
            f"{config.n_relations} relations, data files define "
            f"{vocab.n_entities} / {vocab.n_relations}"
        )


# ---------------------------------------------------------------------------
# subcommands

def cmd_extract(args):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    vocab, arrays, provided = _load_splits(args)
    kg = index_graph(arrays["train"], vocab.n_entities)

    counts = {
        mode: paths.count_quadruples(kg, mode, n_relations=vocab.n_relations)
        for mode in paths.MODES
    }
    for mode in paths.MODES:
        print(f"{mode}\t{counts[mode]}")

    out_file = os.path.join(args.out, "quadruples.tsv")
    if args.k is not None:
        arr = paths.sample_quadruples_array(
            kg, args.mode, args.k, args.seed, n_relations=vocab.n_relations)
        written = paths.write_quadruples(out_file, [arr], vocab)
    else:
        chunks = paths.iter_quadruple_chunks(
            kg, args.mode, n_relations=vocab.n_relations)
        written = paths.write_quadruples(out_file, chunks, vocab)
    print(f"wrote {written} quadruples ({args.mode}) to {out_file}")

    vocab_file = os.path.join(args.out, "vocab.txt")
    vocab.save(vocab_file)
    _write_manifest(
        args.out, "extract",
        {"mode": args.mode, "k": args.k, "counts": {m: str(c) for m, c in counts.items()}},
        provided, [out_file, vocab_file], args.seed, started, ended=time.time(),
    )
    return EXIT_OK


def _load_quadruples(args, vocab, kg):
    if getattr(args, "quadruples", None):
        return paths.read_quadruples(args.quadruples, vocab)
    k = getattr(args, "quad_sample", None)
    if k is not None:
        return paths.sample_quadruples_array(
            kg, args.mode, k, args.seed, n_relations=vocab.n_relations)
    chunks = list(paths.iter_quadruple_chunks(
        kg, args.mode, n_relations=vocab.n_relations))
    if not chunks:
        return np.empty((0, 4), dtype=np.int32)
    return np.concatenate(chunks)


def cmd_pretrain(args):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    merged = _merge_config(args, _default_config(epochs=800))
    merged["seed"] = args.seed
    merged["deterministic"] = args.deterministic
    train_cfg, model_part = _split_config(merged)

    vocab, arrays, provided = _load_splits(args)
    kg = index_graph(arrays["train"], vocab.n_entities)
    quads = _load_quadruples(args, vocab, kg)
    records = trainer.Records(arrays["train"], quads)

    log_path = os.path.join(args.out, "loss.log")
    ckpt_dir = os.path.join(args.out, "checkpoints")
    start_epoch = 0
    state = None
    if args.resume:
        params, state, config = load_checkpoint(args.resume)
        _check_vocab(config, vocab)
        if state is None:
            raise ValidationError("resume checkpoint lacks optimizer state")
        spe = (records.total + train_cfg.batch_size - 1) // train_cfg.batch_size
        start_epoch = state.step // spe
    else:
        config = ModelConfig(n_entities=vocab.n_entities,
                             n_relations=vocab.n_relations, **model_part)
        params = init_parameters(config, args.seed)

    inputs = dict(provided)
    if getattr(args, "quadruples", None):
        inputs["quadruples"] = args.quadruples
    run_config = {**merged, "model": config.to_dict(), "n_quadruples": len(quads)}
    _write_manifest(args.out, "pretrain", run_config, inputs, [], args.seed, started)

    result = trainer.pretrain(
        params, config, records, train_cfg,
        log_path=log_path, checkpoint_dir=ckpt_dir,
        checkpoint_every=args.checkpoint_every,
        optimizer_state=state, start_epoch=start_epoch,
    )
    final = os.path.join(args.out, "checkpoint")
    save_checkpoint(result.params, result.optimizer_state, config, final)
    print(f"pretrained {train_cfg.epochs} epochs; "
          f"final loss {result.losses[-1][1]:.6f}; checkpoint at {final}")

    _write_manifest(args.out, "pretrain", run_config, inputs,
                    [final, log_path], args.seed, started, ended=time.time())
    return EXIT_OK


def cmd_finetune(args):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    merged = _merge_config(args, _default_config(epochs=100))
    merged["seed"] = args.seed
    merged["deterministic"] = args.deterministic
    train_cfg, model_part = _split_config(merged)

    if not (args.resume or args.from_checkpoint or args.fresh):
        raise ValidationError(
            "finetune needs one of --from-checkpoint, --fresh, or --resume")
    require = ("train", "valid") if args.early_stop else ("train",)
    vocab, arrays, provided = _load_splits(args, require=require)

    log_path = os.path.join(args.out, "loss.log")
    ckpt_dir = os.path.join(args.out, "checkpoints")
    start_epoch = 0
    state = None
    if args.resume:
        params, state, config = load_checkpoint(args.resume)
        _check_vocab(config, vocab)
        if state is None:
            raise ValidationError("resume checkpoint lacks optimizer state")
        n = len(arrays["train"]) * (2 if args.task == "link" else 1)
        spe = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
        start_epoch = state.step // spe
    elif args.from_checkpoint:
        params, _, config = load_checkpoint(args.from_checkpoint)
        _check_vocab(config, vocab)
    else:  # --fresh: the no-pretraining ablation arm
        config = ModelConfig(n_entities=vocab.n_entities,
                             n_relations=vocab.n_relations, **model_part)
        params = init_parameters(config, args.seed)

    kwargs = {}
    if args.early_stop:
        fi = build_filter_index(
            arrays["train"],
            arrays["valid"] if arrays["valid"] is not None else [],
            arrays["test"] if arrays["test"] is not None else [],
        )
        kwargs = dict(valid_triples=arrays["valid"], filter_index=fi)

    inputs = dict(provided)
    if args.from_checkpoint:
        inputs["from_checkpoint"] = os.path.join(args.from_checkpoint, "params.bin")
    run_config = {**merged, "task": args.task, "model": config.to_dict(),
                  "fresh": bool(args.fresh)}
    _write_manifest(args.out, "finetune", run_config, inputs, [], args.seed, started)

    result = trainer.finetune(
        params, config, arrays["train"], args.task, train_cfg,
        log_path=log_path, checkpoint_dir=ckpt_dir,
        checkpoint_every=args.checkpoint_every,
        optimizer_state=state, start_epoch=start_epoch, **kwargs,
    )
    final = os.path.join(args.out, "checkpoint")
    save_checkpoint(result.params, result.optimizer_state, config, final)
    print(f"finetuned ({args.task}); final loss {result.losses[-1][1]:.6f}; "
          f"checkpoint at {final}")

    _write_manifest(args.out, "finetune", run_config, inputs,
                    [final, log_path], args.seed, started, ended=time.time())
    return EXIT_OK


def cmd_eval(args):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    vocab, arrays, provided = _load_splits(args, require=("train", "valid", "test"))
    params, _, config = load_checkpoint(args.checkpoint)
    _check_vocab(config, vocab)

    fi = build_filter_index(arrays["train"], arrays["valid"], arrays["test"])
    split_arr = arrays[args.split]
    eval_fn = (evaluator.evaluate_link_prediction if args.task == "link"
               else evaluator.evaluate_relation_prediction)
    metrics, ranks = eval_fn(
        params, config, split_arr, fi,
        filtered=not args.raw, tie_break=args.tie_break, return_ranks=True,
    )

    results = os.path.join(args.out, "results.tsv")
    evaluator.write_results_row(results, args.task, args.split, metrics)
    outputs = [results]
    if args.dump_ranks:
        rank_file = os.path.join(args.out, "ranks.tsv")
        evaluator.write_rank_dump(rank_file, ranks)
        outputs.append(rank_file)

    setting = "raw" if args.raw else "filtered"
    print(f"{args.task} {args.split} ({setting}): MRR {metrics.mrr:.4f} "
          f"H@1 {metrics.hits1:.4f} H@3 {metrics.hits3:.4f} "
          f"H@10 {metrics.hits10:.4f} over {metrics.n_queries} queries")
    _write_manifest(args.out, "eval",
                    {"task": args.task, "split": args.split, "raw": args.raw,
                     "tie_break": args.tie_break},
                    {**provided, "checkpoint": os.path.join(args.checkpoint, "params.bin")},
                    outputs, args.seed, started, ended=time.time())
    return EXIT_OK


def _parse_group_file(path, vocab):
    """Lines: group_id TAB h TAB r TAB t, or group_id TAB h TAB r1 TAB r2 TAB t."""
    groups = []
    with open(path, "r", encoding="utf-8", newline="\n") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) == 4:
                gid, h, r, t = parts
                rec = (vocab.entity_id(h), vocab.relation_id(r), None,
                       vocab.entity_id(t))
            elif len(parts) == 5:
                gid, h, r1, r2, t = parts
                rec = (vocab.entity_id(h), vocab.relation_id(r1),
                       vocab.relation_id(r2), vocab.entity_id(t))
            else:
                raise ValidationError(
                    f"{path}:{lineno}: expected 4 or 5 fields, got {len(parts)}")
            groups.append((gid, rec))
    by_group = {}
    for gid, rec in groups:
        by_group.setdefault(gid, []).append(rec)
    for gid, recs in by_group.items():
        pairs = {(r[0], r[3]) for r in recs}
        if len(pairs) > 1:
            raise ValidationError(
                f"group {gid!r} mixes records with different (head, tail) pairs")
    return groups


def cmd_dump_hidden(args):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    vocab, arrays, provided = _load_splits(args)
    params, _, config = load_checkpoint(args.checkpoint)
    _check_vocab(config, vocab)
    groups = _parse_group_file(args.groups, vocab)

    out_file = os.path.join(args.out, "hidden.tsv")
    with open(out_file, "w", encoding="utf-8") as f:
        for gid, (h, r1, r2, t) in groups:
            tokens = np.full((1, 4), PAD_ID, dtype=np.int32)
            tokens[0, 0] = h
            tokens[0, 1] = MASK_ID  # mask the tail
            tokens[0, 2] = r1
            if r2 is None:
                kind, length = "triple", 3
            else:
                kind, length = "quadruple", 4
                tokens[0, 3] = r2
            trace = forward_batch(params, config, tokens, [length], [1],
                                  train_mode=False)
            values = "\t".join(f"{x:.8e}" for x in trace.hidden[0])
            f.write(f"{gid}\t{kind}\t{values}\n")

    print(f"wrote {len(groups)} hidden states to {out_file}")
    _write_manifest(args.out, "dump-hidden", {"groups": str(args.groups)},
                    {**provided, "groups": args.groups,
                     "checkpoint": os.path.join(args.checkpoint, "params.bin")},
                    [out_file], args.seed, started, ended=time.time())
    return EXIT_OK


def cmd_gradcheck(args):
    from kgpath.gradcheck import gradient_check

    config = ModelConfig(
        n_entities=args.entities, n_relations=args.relations,
        n_layers=args.n_layers, n_heads=args.n_heads, hidden=args.hidden,
        dropout_rate=args.dropout_rate,
    )
    report = gradient_check(config, args.seed, args.step, args.tolerance)
    for name in sorted(report.per_tensor):
        flag = "ok" if report.per_tensor[name] <= args.tolerance else "FAIL"
        print(f"{name}\t{report.per_tensor[name]:.3e}\t{flag}")
    print(f"max relative error {report.max_error:.3e} "
          f"({'pass' if report.passed else 'fail'} at {args.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_ERROR


# ---------------------------------------------------------------------------
# parser

def _default_config(epochs):
    d = TrainConfig().to_dict()
    d["epochs"] = epochs
    # raw class defaults (ff_inner=0 keeps the 4*hidden rule alive)
    d.update({f.name: f.default for f in dataclass_fields(ModelConfig)
              if f.name in MODEL_KEYS})
    return d


def _add_common(sub):
    sub.add_argument("--train", help="training triples file")
    sub.add_argument("--valid", help="validation triples file")
    sub.add_argument("--test", help="test triples file")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--workers", type=int, default=1,
                     help="accepted for interface compatibility; execution is "
                          "single-process and deterministic")
    sub.add_argument("--deterministic", action="store_true", default=True)
    sub.add_argument("--out", required=True, help="output directory")


def _add_train_flags(sub):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--learning-rate", dest="learning_rate", type=float)
    sub.add_argument("--warmup-fraction", dest="warmup_fraction", type=float)
    sub.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    sub.add_argument("--clip-norm", dest="clip_norm", type=float)
    sub.add_argument("--n-layers", dest="n_layers", type=int)
    sub.add_argument("--n-heads", dest="n_heads", type=int)
    sub.add_argument("--hidden", type=int)
    sub.add_argument("--ff-inner", dest="ff_inner", type=int)
    sub.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    sub.add_argument("--checkpoint-every", dest="checkpoint_every",
                     type=int, default=0)
    sub.add_argument("--resume", help="checkpoint directory to resume from")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kgpath",
        description="Path-based pre-training for knowledge graph completion",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("extract", help="count/enumerate/sample quadruples")
    _add_common(p)
    p.add_argument("--mode", choices=paths.MODES, default=paths.FORWARD_ONLY)
    p.add_argument("-k", type=int, default=None,
                   help="reservoir sample size; omit to write all quadruples")
    p.set_defaults(func=cmd_extract)

    p = subs.add_parser("pretrain", help="masked-entity pre-training")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--quadruples", help="pre-extracted quadruple file")
    p.add_argument("--quad-sample", dest="quad_sample", type=int,
                   help="sample this many quadruples on the fly")
    p.add_argument("--mode", choices=paths.MODES, default=paths.FORWARD_ONLY)
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("finetune", help="link/relation prediction finetuning")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--task", choices=("link", "relation"), required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--from-checkpoint", dest="from_checkpoint",
                     help="start from a pre-trained checkpoint")
    src.add_argument("--fresh", action="store_true",
                     help="train from scratch (no-pretraining ablation)")
    p.add_argument("--early-stop", dest="early_stop", action="store_true",
                   help="early stopping on validation MRR (needs --valid)")
    p.set_defaults(func=cmd_finetune)

    p = subs.add_parser("eval", help="filtered ranking evaluation")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("link", "relation"), required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--raw", action="store_true", help="disable filtering")
    p.add_argument("--tie-break", dest="tie_break",
                   choices=tuple(evaluator.TIE_MODES), default="deterministic")
    p.add_argument("--dump-ranks", dest="dump_ranks", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("dump-hidden",
                        help="hidden states of masked tails per sample group")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--groups", required=True,
                   help="group file: group_id TAB h TAB r[ TAB r2] TAB t")
    p.set_defaults(func=cmd_dump_hidden)

    p = subs.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--n-layers", dest="n_layers", type=int, default=1)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=2)
    p.add_argument("--entities", type=int, default=3)
    p.add_argument("--relations", type=int, default=2)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.last_checkpoint:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    except (KgPathError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
