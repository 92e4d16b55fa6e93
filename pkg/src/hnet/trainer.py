"""AdamW training with warmup-stable-decay scheduling and per-stage
learning-rate modulation.

Outer stages see more positions per batch and narrower widths than the
main network, so their learning rates are scaled up by a per-stage
multiplier derived from the compression targets and widths (or supplied
manually). Metrics stream out as one dict per interval; bits-per-byte is
the evaluation currency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .model import HNet
from .tensor import DTYPE, DiffTensor

ADAM_EPS = 1e-8

# Curvature of the inverse-square-root decay leg: the multiplier follows
# (1/sqrt(1 + 15*tau) - 1/4) / (3/4), which is exactly 1 at tau=0 and
# exactly 0 at tau=1.
_DECAY_CURVE = 15.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 3e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    steps: int = 1000
    warmup_frac: float = 0.1
    decay_frac: float = 0.2
    batch_size: int = 8
    seq_len: int = 256
    seed: int = 0
    alpha: Optional[float] = None  # falls back to the model config value
    n_gpt: float = 4.6  # average bytes per BPE token, for lambda derivation
    lambda_mode: str = "formula"  # formula | manual
    lambda_manual: Optional[list] = None
    eval_interval: int = 250
    eval_windows: int = 16
    log_interval: int = 25

    def __post_init__(self):
        if self.warmup_frac + self.decay_frac > 1.0 + 1e-9:
            raise ValueError("warmup + decay fractions must be <= 1")
        if self.lambda_mode not in ("formula", "manual"):
            raise ValueError("lambda_mode must be formula|manual")


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def total_loss(logits: DiffTensor, targets, ratio_losses, alpha: float) -> DiffTensor:
    """Mean next-byte cross-entropy plus alpha times summed ratio losses."""
    loss = T.cross_entropy_with_logits(logits, targets)
    for r in ratio_losses:
        loss = T.add(loss, T.mul(r, alpha))
    return loss


def bpb(total_nll_nats: float, total_bytes: int) -> float:
    """Bits per byte from a summed negative log-likelihood in nats."""
    if total_bytes <= 0:
        raise ValueError("bpb: total_bytes must be positive")
    return total_nll_nats / (math.log(2.0) * total_bytes)


def bpb_rescaled_for_tokens(
    total_nll_nats: float, bytes_per_token: float, tokens: int
) -> float:
    """BPB for a tokenized model: token NLL rescaled by bytes represented."""
    n_bytes = bytes_per_token * tokens
    if n_bytes <= 0:
        raise ValueError("bpb: byte count must be positive")
    return total_nll_nats / (math.log(2.0) * n_bytes)


# ---------------------------------------------------------------------------
# schedule and modulation
# ---------------------------------------------------------------------------


def lr_schedule(step: float, config: TrainConfig) -> float:
    """Warmup-stable-decay multiplier, continuous at both joints.

    Accepts fractional steps so continuity is checkable; integer training
    steps are evaluated at step + 1 during warmup (a step-0 multiplier of
    exactly 0 would waste the first update).
    """
    total = config.steps
    w = config.warmup_frac * total
    d = config.decay_frac * total
    s = float(step)
    if w > 0 and s < w:
        return min(1.0, (s + 1.0) / w)
    stable_end = total - d
    if s <= stable_end or d <= 0:
        return 1.0
    tau = min(1.0, (s - stable_end) / d)
    c = _DECAY_CURVE
    return (1.0 / math.sqrt(1.0 + c * tau) - 1.0 / math.sqrt(1.0 + c)) / (
        1.0 - 1.0 / math.sqrt(1.0 + c)
    )


def lambda_modulation(
    stage: int, widths: list, ratios: list, n_gpt: float = 4.6
) -> float:
    """Per-stage learning-rate multiplier.

    lambda^s = sqrt(n_gpt * (prod_{i>=s} N^i / prod_i N^i) * D^S / D^s)
    with N^S = 1. ``widths`` has S+1 entries (stage widths then main
    width); ``ratios`` has S entries.
    """
    n_ext = list(ratios) + [1.0]
    num = float(np.prod(n_ext[stage:]))
    den = float(np.prod(n_ext))
    return math.sqrt(n_gpt * (num / den) * widths[-1] / widths[stage])


def stage_lambdas(model: HNet, tc: TrainConfig) -> list:
    s_count = len(model.config.stages) + 1
    if tc.lambda_mode == "manual":
        lam = list(tc.lambda_manual or [])
        if len(lam) != s_count:
            raise ValueError(f"need {s_count} manual lambdas, got {len(lam)}")
        return [float(x) for x in lam]
    widths = [s.width for s in model.config.stages] + [model.config.main_width]
    ratios = [s.target_ratio for s in model.config.stages]
    return [lambda_modulation(s, widths, ratios, tc.n_gpt) for s in range(s_count)]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over per-stage parameter groups."""

    def __init__(self, model: HNet, tc: TrainConfig, lambdas: list):
        self.tc = tc
        self.params = []  # (name, tensor, lambda)
        for name, p in model.named_parameters():
            self.params.append((name, p, lambdas[model.stage_of_param(name)]))
        self.m = {name: np.zeros_like(p.data) for name, p, _ in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p, _ in self.params}
        self.t = 0
        self.skipped = 0

    def step(self, lr_mult: float) -> dict:
        tc = self.tc
        grads = {name: p.grad_or_zeros() for name, p, _ in self.params}
        sq = 0.0
        for g in grads.values():
            sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
        gnorm = math.sqrt(sq)
        if not math.isfinite(gnorm):
            self.skipped += 1
            return {"skipped": True, "grad_norm": gnorm}
        scale = 1.0
        if tc.grad_clip > 0 and gnorm > tc.grad_clip:
            scale = tc.grad_clip / gnorm
        self.t += 1
        b1, b2 = tc.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p, lam in self.params:
            g = grads[name] * DTYPE(scale)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            lr = tc.base_lr * lam * lr_mult
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            p.data -= DTYPE(lr) * update
            if tc.weight_decay:
                p.data -= DTYPE(lr * tc.weight_decay) * p.data
        return {"skipped": False, "grad_norm": gnorm, "clip_scale": scale}

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        for name in self.m:
            self.m[name][:] = arrays[f"opt.m.{name}"].reshape(self.m[name].shape)
            self.v[name][:] = arrays[f"opt.v.{name}"].reshape(self.v[name].shape)
        self.t = t


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def sample_window_starts(
    gen: np.random.Generator, n_bytes: int, seq_len: int, count: int
) -> np.ndarray:
    hi = n_bytes - (seq_len + 1)
    if hi < 0:
        raise ValueError(f"corpus of {n_bytes} bytes too short for seq_len {seq_len}")
    return gen.integers(0, hi + 1, size=count)


def eval_bpb(model: HNet, val_bytes: np.ndarray, seq_len: int, windows: int) -> dict:
    """BPB and realized compression on evenly spaced validation windows."""
    n = len(val_bytes) - (seq_len + 1)
    if n < 0:
        raise ValueError("validation split too short for seq_len")
    starts = np.unique(np.linspace(0, max(n, 0), num=max(windows, 1), dtype=np.int64))
    total_nll = 0.0
    total_bytes = 0
    sel = np.zeros(len(model.config.stages))
    ftotal = np.zeros(len(model.config.stages))
    for st in starts:
        seq = val_bytes[st : st + seq_len + 1]
        out = model.forward(seq[:-1])
        ce = T.cross_entropy_with_logits(out.logits, seq[1:])
        total_nll += ce.item() * seq_len
        total_bytes += seq_len
        for s, dec in enumerate(out.decisions):
            sel[s] += dec.num_chunks
            ftotal[s] += dec.b.size
    ratios = (ftotal / np.maximum(sel, 1)).tolist()  # realized bytes per chunk
    return {
        "bpb": bpb(total_nll, total_bytes),
        "nll_per_byte": total_nll / total_bytes,
        "realized_ratio": ratios,
        "windows": int(len(starts)),
    }


def train_loop(
    model: HNet,
    train_bytes: np.ndarray,
    val_bytes: Optional[np.ndarray],
    tc: TrainConfig,
    on_metrics: Optional[Callable[[dict], None]] = None,
    optimizer: Optional[AdamW] = None,
    data_gen: Optional[np.random.Generator] = None,
    start_step: int = 0,
) -> dict:
    """Deterministic training given a seed; emits one metrics dict per
    logged step via ``on_metrics`` and returns the final summary.

    Sequences in a batch are processed one at a time (gradient
    accumulation into shared parameters is serialized); chunk counts vary
    freely per sequence with no padding anywhere.
    """
    alpha = tc.alpha if tc.alpha is not None else model.config.alpha
    lambdas = stage_lambdas(model, tc)
    opt = optimizer or AdamW(model, tc, lambdas)
    gen = data_gen or np.random.default_rng(tc.seed)
    n_stages = len(model.config.stages)
    last = {}

    for step in range(start_step, tc.steps):
        mult = lr_schedule(step, tc)
        model.zero_grad()
        starts = sample_window_starts(gen, len(train_bytes), tc.seq_len, tc.batch_size)
        loss_sum = 0.0
        ar_sum = 0.0
        fsum = np.zeros(n_stages)
        gsum = np.zeros(n_stages)
        for st in starts:
            seq = train_bytes[st : st + tc.seq_len + 1]
            tape = T.Tape()
            with tape:
                out = model.forward(seq[:-1])
                ar = T.cross_entropy_with_logits(out.logits, seq[1:])
                loss = ar
                for r in out.ratio_losses:
                    loss = T.add(loss, T.mul(r, alpha))
                scaled = T.mul(loss, 1.0 / tc.batch_size)
            tape.backward(scaled)
            loss_sum += loss.item()
            ar_sum += ar.item()
            for s, dec in enumerate(out.decisions):
                fsum[s] += dec.fraction_selected()
                gsum[s] += float(dec.p.data.mean())
        mean_loss = loss_sum / tc.batch_size
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(f"non-finite loss {mean_loss} at step {step}")
        info = opt.step(mult)
        record = {
            "step": step,
            "lr": tc.base_lr * mult,
            "loss": mean_loss,
            "loss_ar": ar_sum / tc.batch_size,
            "F": (fsum / tc.batch_size).tolist(),
            "G": (gsum / tc.batch_size).tolist(),
            "grad_norm": info.get("grad_norm"),
            "lambda": lambdas,
            "seed": tc.seed,
        }
        if info.get("skipped"):
            record["skipped"] = True
        is_last = step == tc.steps - 1
        if val_bytes is not None and (
            (step + 1) % tc.eval_interval == 0 or is_last
        ):
            record.update(eval_bpb(model, val_bytes, tc.seq_len, tc.eval_windows))
        if on_metrics is not None and (
            step % tc.log_interval == 0 or is_last or "bpb" in record
        ):
            on_metrics(record)
        last = record
    return {"optimizer": opt, "data_gen": gen, "last": last, "lambdas": lambdas}
