#!/usr/bin/env python3
"""Train one desk-scale variant for the slow acceptance checks.

Produces .acceptance/<variant>/ with metrics.jsonl, checkpoint.hnet and
final-eval JSON. The three variants (dc, pool, space) share the training
budget, corpus, seed, and architecture; only the chunking mechanism
differs. The slow acceptance tests consume these artifacts and retrain
only if they are missing.

Usage:
    python scripts/build_corpus.py --out .acceptance/corpus.txt --megabytes 5
    python scripts/acceptance_run.py --variant dc --steps 12000
"""

import argparse
import json
import os
import sys
import time

from hnet import io as hio
from hnet import trainer as tr
from hnet.model import HNet, desk_1stage

DEFAULT_STEPS = 12000
SEED = 0


def train_config(steps: int) -> tr.TrainConfig:
    return tr.TrainConfig(
        base_lr=1e-3,
        steps=steps,
        batch_size=8,
        seq_len=512,
        seed=SEED,
        eval_interval=500,
        log_interval=50,
        eval_windows=24,
    )


def run(variant: str, steps: int, corpus_path: str, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    corpus = hio.load_corpus(corpus_path, 0.9, seed=SEED)
    model = HNet(desk_1stage(chunker=variant), seed=SEED)
    tc = train_config(steps)
    t0 = time.time()
    with hio.JsonlWriter(os.path.join(out_dir, "metrics.jsonl")) as writer:

        def on_metrics(rec):
            writer.write(rec)
            if rec["step"] % 500 == 0 or "bpb" in rec:
                brief = {k: rec[k] for k in ("step", "loss", "bpb", "F") if k in rec}
                print(f"[{variant}] {json.dumps(brief)}", file=sys.stderr, flush=True)

        result = tr.train_loop(
            model, corpus.train, corpus.val, tc, on_metrics=on_metrics
        )
    final = tr.eval_bpb(model, corpus.val, tc.seq_len, windows=64)
    final.update(
        variant=variant,
        steps=steps,
        seed=SEED,
        wall_seconds=round(time.time() - t0, 1),
        F=result["last"]["F"],
        G=result["last"]["G"],
    )
    hio.save_checkpoint(
        os.path.join(out_dir, "checkpoint.hnet"),
        model,
        step=steps,
        optimizer_arrays=result["optimizer"].state_arrays(),
        adam_t=result["optimizer"].t,
        rng_state=hio.rng_state_to_json(result["data_gen"]),
    )
    with open(os.path.join(out_dir, "final.json"), "w") as f:
        json.dump(final, f, indent=2, sort_keys=True)
    print(f"[{variant}] done: {json.dumps(final)}", file=sys.stderr)
    return final


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variant", choices=["dc", "pool", "space"], required=True)
    ap.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    ap.add_argument("--corpus", default=".acceptance/corpus.txt")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    out = args.out or os.path.join(".acceptance", args.variant)
    run(args.variant, args.steps, args.corpus, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
