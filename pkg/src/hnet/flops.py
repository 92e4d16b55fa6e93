"""Closed-form forward-FLOPs accounting, exact in integer arithmetic.

Covers the standard cost items: embeddings, attention (quadratic terms
capped at the sliding window), the recurrent-layer items (billed by the
same rule regardless of the simplified kernel used here), gated MLP, and
the prediction head. Routing projections and residual projections are
deliberately not billed; the accountant mirrors the conventional cost
model used for architecture matching, not this package's exact kernel
set. A training step is counted as 3x forward (backward costs twice the
forward pass).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .layers import CONV_WINDOW, LayerSpec
from .model import ModelConfig

TRAIN_STEP_MULTIPLIER = 3


def flops_attention(
    seq_len: int, d_model: int, heads: int, head_dim: int, window: int = 0
) -> int:
    if seq_len == 0:
        return 0
    hh = heads * head_dim
    w = seq_len if window <= 0 else min(seq_len, window)
    qkv = 2 * 3 * seq_len * d_model * hh
    logits = 2 * seq_len * w * hh
    softmax = 3 * heads * seq_len * w
    mix = 2 * seq_len * w * hh
    out = 2 * seq_len * hh * d_model
    return qkv + logits + softmax + mix + out


def flops_mamba(
    seq_len: int,
    d_model: int,
    d_state: int,
    expand: int,
    heads: int,
    window: int = CONV_WINDOW,
) -> int:
    if seq_len == 0:
        return 0
    xz = 2 * seq_len * d_model * (2 * expand * d_model)
    bcdt = 2 * seq_len * d_model * (2 * d_state + heads)
    ssd = 2 * 3 * seq_len * (expand * d_model) * d_state
    conv = 2 * seq_len * d_model * window
    gating = 5 * seq_len * d_model
    out = 2 * seq_len * d_model * d_model
    return xz + bcdt + ssd + conv + gating + out


def flops_gated_mlp(seq_len: int, d_model: int, ffw: int) -> int:
    if seq_len == 0:
        return 0
    return 2 * seq_len * (3 * d_model * ffw) + 5 * seq_len * d_model


def flops_embed_head(seq_len: int, vocab: int, d_model: int) -> int:
    """Embedding lookup plus logit prediction head, both 2*L*V*D."""
    return 2 * 2 * seq_len * vocab * d_model


def flops_layer(spec: LayerSpec, seq_len: int) -> int:
    if spec.kind == "attention":
        return flops_attention(
            seq_len, spec.width, spec.heads, spec.head_dim, spec.window
        )
    if spec.kind == "ssm":
        return flops_mamba(
            seq_len, spec.width, spec.d_state, spec.expand, spec.heads, CONV_WINDOW
        )
    if spec.kind == "gated_mlp":
        return flops_gated_mlp(seq_len, spec.width, spec.ffw_size)
    raise ValueError(f"unknown layer kind {spec.kind}")


@dataclass
class CostReport:
    stage_subtotals: list  # [{"name", "length", "flops"}...]
    layer_kind_totals: dict
    total_forward: int
    total_train_step: int
    flops_per_byte: float
    lengths: list
    planning: bool

    def to_dict(self) -> dict:
        return {
            "stage_subtotals": self.stage_subtotals,
            "layer_kind_totals": self.layer_kind_totals,
            "total_forward": self.total_forward,
            "total_train_step": self.total_train_step,
            "flops_per_byte": self.flops_per_byte,
            "lengths": self.lengths,
            "planning": self.planning,
        }

    def render_text(self) -> str:
        lines = ["component        length        forward FLOPs"]
        for row in self.stage_subtotals:
            lines.append(f"{row['name']:<16} {row['length']:>6} {row['flops']:>20,}")
        lines.append(f"{'total forward':<16} {'':>6} {self.total_forward:>20,}")
        lines.append(f"{'train step (3x)':<16} {'':>6} {self.total_train_step:>20,}")
        lines.append(f"FLOPs/byte: {self.flops_per_byte:,.1f}")
        if self.planning:
            lines.append("(planning mode: lengths derived from target ratios)")
        return "\n".join(lines)


def planned_lengths(config: ModelConfig, seq_len: int) -> list:
    lengths = [seq_len]
    for st in config.stages:
        lengths.append(max(1, round(lengths[-1] / st.target_ratio)))
    return lengths


def flops_model(
    config: ModelConfig,
    lengths: Optional[list] = None,
    seq_len: Optional[int] = None,
) -> CostReport:
    """Bill stage-s layers at the realized compressed length L^s.

    ``lengths`` is [L^0, ..., L^S] from an actual forward; when omitted,
    lengths are planned from the target ratios starting at ``seq_len``
    and the report is flagged as planning mode.
    """
    planning = lengths is None
    if planning:
        if seq_len is None:
            raise ValueError("flops_model: need lengths or seq_len")
        lengths = planned_lengths(config, seq_len)
    if len(lengths) != config.num_stages + 1:
        raise ValueError(
            f"need {config.num_stages + 1} lengths, got {len(lengths)}"
        )
    subtotals = []
    kind_totals: dict = {}
    total = 0

    def bill(name, specs, L):
        nonlocal total
        flop = 0
        for spec in specs:
            f = flops_layer(spec, L)
            flop += f
            kind_totals[spec.kind] = kind_totals.get(spec.kind, 0) + f
        subtotals.append({"name": name, "length": int(L), "flops": flop})
        total += flop

    eh = flops_embed_head(lengths[0], config.vocab, config.stages[0].width if config.stages else config.main_width)
    kind_totals["embed_head"] = eh
    subtotals.append({"name": "embed+head", "length": int(lengths[0]), "flops": eh})
    total += eh
    for s, st in enumerate(config.stages):
        bill(f"stage{s}.encoder", st.encoder, lengths[s])
    bill("main", config.main, lengths[-1])
    for s in range(config.num_stages - 1, -1, -1):
        bill(f"stage{s}.decoder", config.stages[s].decoder, lengths[s])

    return CostReport(
        stage_subtotals=subtotals,
        layer_kind_totals=kind_totals,
        total_forward=total,
        total_train_step=TRAIN_STEP_MULTIPLIER * total,
        flops_per_byte=total / lengths[0],
        lengths=[int(x) for x in lengths],
        planning=planning,
    )
