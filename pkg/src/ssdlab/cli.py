"""Command-line front end.

Subcommands: train, moefy, eval, analyze, export. Configuration comes from an
optional JSON file (--config) whose keys mirror the dataclass fields
(model/corpus/optimizer/run/ssd, see README); command-line flags override file
values. Rejected preconditions exit nonzero with a diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from ssdlab.checkpoint import load_checkpoint, save_checkpoint
from ssdlab.data import CorpusConfig, tokenize_corpus
from ssdlab.metrics import export_metrics, load_metrics_jsonl
from ssdlab.model import ModelConfig
from ssdlab.numerics import make_rng
from ssdlab.scheduler import SSDConfig
from ssdlab.training import (
    DenseTrain,
    OptimizerConfig,
    RunConfig,
    SmoeTrain,
    SsdTrain,
    eval_perplexity,
    moefy_checkpoint,
    train,
)

SMOE_PRESET = {"num_experts": 3, "active_experts": 2}
SSD_PRESET = {"num_experts": 32, "active_experts": 6}


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _section(cfg_file: dict, name: str, overrides: dict, cls):
    merged = dict(cfg_file.get(name, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def cmd_train(args) -> int:
    cfg_file = _load_config(args.config)
    corpus_cfg = _section(cfg_file, "corpus",
                          {"path": args.corpus, "seq_len": args.seq_len},
                          CorpusConfig)
    corpus = tokenize_corpus(corpus_cfg)
    model_over = {"vocab_size": corpus.manifest["vocab_size"]}
    model_cfg = _section(cfg_file, "model", model_over, ModelConfig)
    opt = _section(cfg_file, "optimizer", {}, OptimizerConfig)
    run = _section(cfg_file, "run",
                   {"total_steps": args.steps, "out_dir": args.out}, RunConfig)
    mode_name = args.mode or cfg_file.get("mode", "dense")
    moe_keys = dict(cfg_file.get("moe", {}))
    if args.experts is not None:
        moe_keys["num_experts"] = args.experts
    if args.k is not None:
        moe_keys["active_experts"] = args.k
    if mode_name == "dense":
        mode = DenseTrain()
    elif mode_name == "smoe":
        mode = SmoeTrain(**{**SMOE_PRESET, **moe_keys})
    elif mode_name == "ssd":
        ssd = _section(cfg_file, "ssd", {"total_steps": run.total_steps}, SSDConfig)
        mode = SsdTrain(ssd=ssd, **{**SSD_PRESET, **moe_keys})
    else:
        raise ValueError(f"unknown mode {mode_name!r}")
    resume = load_checkpoint(args.resume) if args.resume else None
    final, records = train(model_cfg, corpus, mode, opt, seed=args.seed,
                           run=run, resume_from=resume)
    last = records[-1] if records else None
    print(f"trained {run.total_steps} steps "
          f"(final loss {last.loss:.4f}, ppl {last.ppl:.4f})" if last else "no steps run")
    if run.out_dir:
        print(f"run artifacts in {run.out_dir}")
    return 0


def cmd_moefy(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = moefy_checkpoint(ckpt, args.experts, seed=args.seed)
    save_checkpoint(out, args.out)
    print(f"wrote MoEfied checkpoint ({args.experts} experts) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = tokenize_corpus(CorpusConfig(args.corpus, tokenizer=args.tokenizer,
                                          seq_len=args.seq_len))
    ppl = eval_perplexity(ckpt, corpus, sparse_k=args.k,
                          dynamic_ratio=args.dynamic_ratio,
                          num_experts=args.experts)
    mode = "dense" if args.k is None else f"k={args.k}, rho={args.dynamic_ratio}"
    print(json.dumps({"perplexity": ppl, "mode": mode, "step": ckpt.step}))
    return 0


def cmd_analyze(args) -> int:
    from ssdlab.analysis import (ActivationSample, activation_sparsity,
                                 pattern_similarity)
    from ssdlab.model import forward_with_cache

    ckpt_a = load_checkpoint(args.checkpoint_a)
    ckpt_b = load_checkpoint(args.checkpoint_b)
    report = pattern_similarity(ckpt_a, ckpt_b, args.experts, make_rng(args.seed))

    def sparsity_of(ckpt):
        model = ckpt.build_model()
        if args.corpus:
            corpus = tokenize_corpus(CorpusConfig(args.corpus, tokenizer=args.tokenizer,
                                                  seq_len=args.seq_len))
            from ssdlab.data import validation_batches
            batches = validation_batches(corpus.val_tokens, corpus.seq_len, 64, 8)
        else:
            rng = make_rng(args.seed)
            batches = [rng.integers(0, ckpt.config.vocab_size, size=(8, args.seq_len + 1))
                       for _ in range(16)]
        stacked = None
        for b in batches:
            _, hiddens, _ = forward_with_cache(model, b[:, :-1])
            stacked = hiddens if stacked is None else [
                np.vstack([s, h]) for s, h in zip(stacked, hiddens)]
        return activation_sparsity(ActivationSample(stacked, step=ckpt.step))

    print(json.dumps({
        "similarity": {"per_layer_ari": report.per_layer_ari,
                       "mean_ari": report.mean_ari},
        "sparsity_a": sparsity_of(ckpt_a),
        "sparsity_b": sparsity_of(ckpt_b),
    }))
    return 0


def cmd_export(args) -> int:
    metrics_path = os.path.join(args.run_dir, "metrics.jsonl")
    run_path = os.path.join(args.run_dir, "run.json")
    records = load_metrics_jsonl(metrics_path)
    with open(run_path) as f:
        n_layers = json.load(f)["n_layers"]
    out = args.out or os.path.join(args.run_dir, f"metrics.{args.format}")
    export_metrics(records, out, args.format, n_layers)
    print(f"wrote {len(records)} records to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssdlab",
                                description="switchable sparse-dense training lab")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pre-train in dense, smoe, or ssd mode")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--corpus", help="path to raw text corpus")
    t.add_argument("--mode", choices=["dense", "smoe", "ssd"])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", help="run directory for checkpoints and metrics")
    t.add_argument("--seq-len", type=int, dest="seq_len")
    t.add_argument("--experts", type=int, help="expert count for smoe/ssd")
    t.add_argument("--k", type=int, help="selected experts for smoe/ssd")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("moefy", help="cluster + split a dense checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--experts", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_moefy)

    e = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--tokenizer", default="byte")
    e.add_argument("--seq-len", type=int, dest="seq_len", default=64)
    e.add_argument("--k", type=int, help="sparse evaluation with k experts")
    e.add_argument("--dynamic-ratio", type=float, default=0.0, dest="dynamic_ratio")
    e.add_argument("--experts", type=int,
                   help="expert count when MoEfying a plain dense checkpoint")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="sparsity and pattern similarity of two checkpoints")
    a.add_argument("--checkpoint-a", required=True, dest="checkpoint_a")
    a.add_argument("--checkpoint-b", required=True, dest="checkpoint_b")
    a.add_argument("--experts", type=int, default=32)
    a.add_argument("--corpus", help="corpus for activation sparsity (random tokens if absent)")
    a.add_argument("--tokenizer", default="byte")
    a.add_argument("--seq-len", type=int, dest="seq_len", default=64)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_analyze)

    x = sub.add_parser("export", help="export a run's metrics stream")
    x.add_argument("--run-dir", required=True, dest="run_dir")
    x.add_argument("--format", choices=["csv", "jsonl"], required=True)
    x.add_argument("--out")
    x.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
