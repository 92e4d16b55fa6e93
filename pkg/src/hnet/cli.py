"""Command-line surface: train, eval, generate, segment, flops."""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys

import numpy as np

from . import io as hio
from . import trainer as tr
from .flops import flops_model
from .inference import InferenceSession, SamplingConfig
from .model import PRESETS, HNet, ModelConfig


def _load_model_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            return ModelConfig.from_json(f.read())
    preset = getattr(args, "preset", None) or "desk1"
    kwargs = {}
    if preset == "desk1":
        if getattr(args, "chunker", None):
            kwargs["chunker"] = args.chunker
        if getattr(args, "target_ratio", None):
            kwargs["target_ratio"] = args.target_ratio
    return PRESETS[preset](**kwargs)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="model config JSON file")
    p.add_argument(
        "--preset", choices=sorted(PRESETS), help="shipped desk-scale config"
    )


def cmd_train(args) -> int:
    cfg = _load_model_config(args)
    if args.alpha is not None:
        cfg.alpha = args.alpha
    created_out = not os.path.exists(args.out)
    os.makedirs(args.out, exist_ok=True)
    try:
        corpus = hio.load_corpus(args.corpus, args.split, seed=args.seed)
        tc = tr.TrainConfig(
            base_lr=args.lr,
            steps=args.steps,
            batch_size=args.batch_size,
            seq_len=args.seq_len,
            seed=args.seed,
            eval_interval=args.eval_interval,
            log_interval=args.log_interval,
            n_gpt=args.n_gpt,
        )
        data_gen = np.random.default_rng(tc.seed)
        start_step = 0
        if args.resume:
            ckpt = hio.load_checkpoint(args.resume)
            model = hio.restore_model(ckpt)
            lambdas = tr.stage_lambdas(model, tc)
            opt = tr.AdamW(model, tc, lambdas)
            if ckpt.has_optimizer:
                opt.load_state_arrays(ckpt.arrays, ckpt.adam_t or 0)
            if ckpt.rng_state:
                data_gen = hio.rng_from_json(ckpt.rng_state)
            start_step = ckpt.step
        else:
            model = HNet(cfg, seed=args.seed)
            opt = tr.AdamW(model, tc, tr.stage_lambdas(model, tc))
        with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as f:
            f.write(model.config.to_json())
        ckpt_path = os.path.join(args.out, "checkpoint.hnet")
        bpb_rows = []

        metrics_path = os.path.join(args.out, "metrics.jsonl")
        with hio.JsonlWriter(metrics_path) as writer:

            def on_metrics(rec):
                writer.write(rec)
                if "bpb" in rec:
                    bpb_rows.append((rec["step"], rec["bpb"]))
                if not args.quiet:
                    brief = {
                        k: rec[k] for k in ("step", "loss", "bpb") if k in rec
                    }
                    print(json.dumps(brief), file=sys.stderr)

            if args.steps > start_step:
                tr.train_loop(
                    model,
                    corpus.train,
                    corpus.val,
                    tc,
                    on_metrics=on_metrics,
                    optimizer=opt,
                    data_gen=data_gen,
                    start_step=start_step,
                )
        hio.save_checkpoint(
            ckpt_path,
            model,
            step=args.steps,
            optimizer_arrays=opt.state_arrays(),
            adam_t=opt.t,
            rng_state=hio.rng_state_to_json(data_gen),
        )
        plots = os.path.join(args.out, "plots")
        os.makedirs(plots, exist_ok=True)
        if bpb_rows:
            hio.write_plot_data(os.path.join(plots, "bpb.tsv"), bpb_rows)
        print(json.dumps({"checkpoint": ckpt_path, "steps": args.steps, "seed": args.seed}))
        return 0
    except BaseException:
        if created_out:
            shutil.rmtree(args.out, ignore_errors=True)
        raise


def cmd_eval(args) -> int:
    ckpt = hio.load_checkpoint(args.checkpoint)
    model = hio.restore_model(ckpt)
    corpus = hio.load_corpus(args.corpus, args.split, seed=args.seed)
    data = corpus.val if corpus.val.size > args.seq_len + 1 else corpus.train
    res = tr.eval_bpb(model, data, args.seq_len, args.windows)
    res["seed"] = args.seed
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    ckpt = hio.load_checkpoint(args.checkpoint)
    model = hio.restore_model(ckpt)
    sess = InferenceSession(
        model,
        SamplingConfig(temperature=args.temperature, top_k=args.top_k, seed=args.seed),
    )
    out, trace = sess.generate(args.prompt.encode("utf-8"), args.max_bytes)
    sys.stdout.write(args.prompt + out.decode("utf-8", errors="replace") + "\n")
    print(
        json.dumps(
            {
                "seed": args.seed,
                "temperature": args.temperature,
                "top_k": args.top_k,
                "bytes": args.max_bytes,
            }
        ),
        file=sys.stderr,
    )
    if args.trace:
        with hio.JsonlWriter(args.trace) as w:
            for rec in trace:
                w.write(rec)
    return 0


def cmd_segment(args) -> int:
    ckpt = hio.load_checkpoint(args.checkpoint)
    model = hio.restore_model(ckpt)
    if args.input:
        data = np.fromfile(args.input, dtype=np.uint8)[: args.max_bytes]
    else:
        data = np.frombuffer(args.text.encode("utf-8"), dtype=np.uint8)
    viz = hio.visualize_boundaries(model, data.astype(np.int64))
    print(viz.render_text())
    flags0 = [r["flags"][0] for r in viz.records]
    print(json.dumps(hio.word_start_overlap(data, flags0), sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(viz.to_jsonl() + "\n")
    return 0


def cmd_flops(args) -> int:
    cfg = _load_model_config(args)
    lengths = None
    if args.lengths:
        lengths = [int(x) for x in args.lengths.split(",")]
    report = flops_model(cfg, lengths=lengths, seq_len=args.seq_len)
    print(report.render_text())
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hnet",
        description="Byte-level hierarchical sequence model with dynamic chunking",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a byte corpus")
    _add_model_args(p)
    p.add_argument("--chunker", choices=["dc", "pool", "space"], help="desk1 chunking variant")
    p.add_argument("--target-ratio", type=int, help="desk1 compression target N")
    p.add_argument("--corpus", required=True, help="path to a raw byte/text corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--alpha", type=float, help="ratio-loss weight (default from config)")
    p.add_argument("--split", type=float, default=0.9, help="train fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-gpt", type=float, default=4.6, help="bytes/token for lambda derivation")
    p.add_argument("--eval-interval", type=int, default=250)
    p.add_argument("--log-interval", type=int, default=25)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="bits-per-byte on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", type=float, default=0.9)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--windows", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample bytes from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="The ")
    p.add_argument("--max-bytes", type=int, default=128)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="write per-byte compute trace JSONL here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("segment", help="visualize learned boundaries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", default=None)
    p.add_argument("--input", default=None, help="read bytes from this file instead")
    p.add_argument("--max-bytes", type=int, default=512)
    p.add_argument("--out", help="write per-position records JSONL here")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("flops", help="closed-form cost report for a config")
    _add_model_args(p)
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--lengths", help="comma-separated realized lengths L0,..,LS")
    p.add_argument("--json-out", help="write the machine-readable report here")
    p.set_defaults(func=cmd_flops)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "segment" and not (args.text or args.input):
        build_parser().error("segment needs --text or --input")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
