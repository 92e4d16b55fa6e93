"""Recursive hierarchy: encoder stages around a main network.

Each stage encodes at its own width, chunks the encoded sequence,
recurses into the next stage on the compressed vectors, then dechunks
and decodes back at full resolution with a near-zero-initialized
residual projection carrying the fine-grained stream. Widths may grow
going inward; rows are widened by appending a shared trainable vector
and narrowed by truncation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import chunking as C
from . import tensor as T
from .layers import (
    Embedding,
    LayerSpec,
    LMHead,
    Module,
    RMSNorm,
    build_blocks,
    trunc_normal,
)
from .tensor import DTYPE, DiffTensor

RESIDUAL_PROJ_STD = 1e-4


@dataclass
class StageSpec:
    """One encoder/decoder pair plus its chunking behavior."""

    width: int
    target_ratio: int
    encoder: list[LayerSpec]
    decoder: list[LayerSpec]
    chunker: str = "dc"  # dc | pool | space
    pool_k: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "target_ratio": self.target_ratio,
            "encoder": [s.to_dict() for s in self.encoder],
            "decoder": [s.to_dict() for s in self.decoder],
            "chunker": self.chunker,
            "pool_k": self.pool_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        return cls(
            width=d["width"],
            target_ratio=d["target_ratio"],
            encoder=[LayerSpec.from_dict(s) for s in d["encoder"]],
            decoder=[LayerSpec.from_dict(s) for s in d["decoder"]],
            chunker=d.get("chunker", "dc"),
            pool_k=d.get("pool_k"),
        )


@dataclass
class ModelConfig:
    stages: list[StageSpec]
    main: list[LayerSpec]
    main_width: int
    vocab: int = 256
    alpha: float = 0.03
    network_norm: bool = True
    downsample_mode: str = "select"  # select | mean | max

    def validate(self) -> None:
        widths = [s.width for s in self.stages] + [self.main_width]
        for a, b in zip(widths, widths[1:]):
            if a > b:
                raise ValueError(f"stage widths must be monotone, got {widths}")
        for i, st in enumerate(self.stages):
            if st.chunker not in ("dc", "pool", "space"):
                raise ValueError(f"unknown chunker {st.chunker!r}")
            if st.chunker == "space" and i != 0:
                raise ValueError("spacelike chunking operates on raw bytes (stage 0 only)")
            if st.target_ratio < 2:
                raise ValueError("target_ratio must be >= 2")
            for spec in st.encoder + st.decoder:
                if spec.width != st.width:
                    raise ValueError(
                        f"stage {i} layer width {spec.width} != stage width {st.width}"
                    )
        for spec in self.main:
            if spec.width != self.main_width:
                raise ValueError("main layer width mismatch")
        if self.downsample_mode not in ("select", "mean", "max"):
            raise ValueError(f"unknown downsample mode {self.downsample_mode!r}")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "main": [s.to_dict() for s in self.main],
            "main_width": self.main_width,
            "vocab": self.vocab,
            "alpha": self.alpha,
            "network_norm": self.network_norm,
            "downsample_mode": self.downsample_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            stages=[StageSpec.from_dict(s) for s in d["stages"]],
            main=[LayerSpec.from_dict(s) for s in d["main"]],
            main_width=d["main_width"],
            vocab=d.get("vocab", 256),
            alpha=d.get("alpha", 0.03),
            network_norm=d.get("network_norm", True),
            downsample_mode=d.get("downsample_mode", "select"),
        )
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# width-change helpers
# ---------------------------------------------------------------------------


def dim_expand(x: DiffTensor, w: Optional[DiffTensor]) -> DiffTensor:
    """Append the shared trainable vector ``w`` to every row (no-op if None)."""
    if w is None or w.size == 0:
        return x
    m = x.shape[0]
    e = w.shape[0]
    data = np.concatenate([x.data, np.broadcast_to(w.data, (m, e))], axis=1)
    d = x.shape[1]

    def vjp(g):
        T.accumulate_grad(x, np.ascontiguousarray(g[:, :d]))
        T.accumulate_grad(w, g[:, d:].sum(axis=0, dtype=DTYPE))

    return T.record_op(data, (x, w), vjp)


def dim_reduce(x: DiffTensor, width: int) -> DiffTensor:
    """Keep the first ``width`` columns."""
    if width > x.shape[1]:
        raise ValueError(f"dim_reduce: {width} > {x.shape[1]} columns")
    if width == x.shape[1]:
        return x
    data = x.data[:, :width].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, :width] = g
        T.accumulate_grad(x, full)

    return T.record_op(data, (x,), vjp)


class ResidualProjection(Module):
    """Linear on the fine-grained stream, initialized close to zero."""

    def __init__(self, rng, width: int):
        self.weight = DiffTensor(
            rng.normal(0.0, RESIDUAL_PROJ_STD, (width, width)).astype(DTYPE),
            requires_grad=True,
        )
        self.bias = DiffTensor(np.zeros(width, dtype=DTYPE), requires_grad=True)

    def forward(self, x: DiffTensor) -> DiffTensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def step(self, row: np.ndarray) -> np.ndarray:
        return row @ self.weight.data + self.bias.data


class Stage(Module):
    def __init__(self, rng, spec: StageSpec, inner_width: int):
        self.spec_ = spec
        self.encoder = build_blocks(rng, spec.encoder)
        self.enc_norm = RMSNorm(spec.width)
        self.router = C.RoutingModule(spec.width) if spec.chunker == "dc" else None
        self.residual = ResidualProjection(rng, spec.width)
        extra = inner_width - spec.width
        self.expand_w = (
            DiffTensor(trunc_normal(rng, (extra,), 0.02), requires_grad=True)
            if extra > 0
            else None
        )
        self.decoder = build_blocks(rng, spec.decoder)
        self.dec_norm = RMSNorm(spec.width)

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        if self.router is not None:
            yield from self.router.named_parameters(f"{prefix}.router" if prefix else "router")


BoundaryOverride = Union[None, str, np.ndarray]


@dataclass
class ForwardOutput:
    logits: DiffTensor  # [L x vocab]
    decisions: list  # BoundaryDecision per stage, outermost first
    ratio_losses: list  # scalar DiffTensor per stage
    stage_lengths: list  # [L^0, ..., L^S]


class HNet(Module):
    """The full hierarchy; stages recurse around the main network."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        widths = [s.width for s in config.stages] + [config.main_width]
        self.embed = Embedding(rng, widths[0], config.vocab)
        self.stages = [
            Stage(rng, spec, widths[i + 1]) for i, spec in enumerate(config.stages)
        ]
        self.main = build_blocks(rng, config.main)
        self.main_norm = RMSNorm(config.main_width)
        self.head = LMHead(rng, widths[0], config.vocab)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        yield from self.embed.named_parameters("embed")
        for i, st in enumerate(self.stages):
            yield from st.named_parameters(f"stages.{i}")
        for i, blk in enumerate(self.main):
            yield from blk.named_parameters(f"main.{i}")
        yield from self.main_norm.named_parameters("main_norm")
        yield from self.head.named_parameters("head")

    def stage_of_param(self, name: str) -> int:
        """Stage index for learning-rate modulation: 0 for byte-resolution
        parameters, S for the main network."""
        if name.startswith("stages."):
            return int(name.split(".")[1])
        if name.startswith(("main.", "main_norm")):
            return len(self.stages)
        return 0  # embed / head operate at byte resolution

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    # -- forward ---------------------------------------------------------------

    def forward(
        self,
        byte_seq,
        boundary_override: Optional[Sequence[BoundaryOverride]] = None,
    ) -> ForwardOutput:
        """Full training-mode evaluation of one byte sequence.

        ``boundary_override`` holds one entry per stage: None for normal
        routing, "ones" to force every boundary probability to exactly 1
        (identity regime), or a bool mask freezing the indicators while p
        is still computed (gradient-check mode).
        """
        byte_seq = np.asarray(byte_seq, dtype=np.int64)
        if byte_seq.size < 1:
            raise ValueError("forward: empty byte sequence")
        if boundary_override is None:
            boundary_override = [None] * len(self.stages)
        decisions: list = [None] * len(self.stages)
        ratios: list = [None] * len(self.stages)
        lengths = [int(byte_seq.size)]

        x0 = self.embed.forward(byte_seq)
        if not self.stages:  # isotropic degenerate case: embed -> main -> head
            z = x0
            for blk in self.main:
                z = blk.forward(z)
            out = self.main_norm.forward(z) if self.config.network_norm else z
        else:
            out = self._stage_forward(
                0, x0, byte_seq, boundary_override, decisions, ratios, lengths
            )
        logits = self.head.forward(out)
        return ForwardOutput(
            logits=logits, decisions=decisions, ratio_losses=ratios, stage_lengths=lengths
        )

    def _decide(
        self,
        stage: Stage,
        x_hat: DiffTensor,
        byte_seq: Optional[np.ndarray],
        override: BoundaryOverride,
    ) -> C.BoundaryDecision:
        L = x_hat.shape[0]
        if isinstance(override, str) and override == "ones":
            return C.BoundaryDecision.from_probs(
                DiffTensor(np.ones(L, dtype=DTYPE))
            )
        if stage.spec_.chunker == "pool":
            return C.pool_chunker(L, stage.spec_.pool_k or stage.spec_.target_ratio)
        if stage.spec_.chunker == "space":
            return C.spacelike_chunker(byte_seq)
        dec, _, _ = C.route(x_hat, stage.router.wq, stage.router.wk)
        if override is not None:
            b = np.asarray(override, dtype=bool)
            if b.shape != (L,) or not b[0]:
                raise ValueError("boundary override must be length L with b[0] set")
            dec = C.BoundaryDecision(p=dec.p, b=b, selected_idx=np.flatnonzero(b))
        return dec

    def _stage_forward(
        self, s, x, byte_seq, overrides, decisions, ratios, lengths
    ) -> DiffTensor:
        stage = self.stages[s]
        for blk in stage.encoder:
            x = blk.forward(x)
        x_hat = stage.enc_norm.forward(x) if self.config.network_norm else x

        dec = self._decide(stage, x_hat, byte_seq if s == 0 else None, overrides[s])
        decisions[s] = dec
        ratios[s] = C.ratio_loss(dec, stage.spec_.target_ratio)
        chunked = C.downsample(x_hat, dec, self.config.downsample_mode)
        lengths.append(chunked.vectors.shape[0])

        inner_in = dim_expand(chunked.vectors, stage.expand_w)
        if s + 1 == len(self.stages):
            z = inner_in
            for blk in self.main:
                z = blk.forward(z)
            z_inner = self.main_norm.forward(z) if self.config.network_norm else z
        else:
            z_inner = self._stage_forward(
                s + 1, inner_in, None, overrides, decisions, ratios, lengths
            )

        z_hat = dim_reduce(z_inner, stage.spec_.width)
        z_bar = C.smooth(z_hat, chunked.P)
        z_tilde = C.upsample(z_bar, dec)
        z = T.add(z_tilde, stage.residual.forward(x_hat))
        for blk in stage.decoder:
            z = blk.forward(z)
        return stage.dec_norm.forward(z) if self.config.network_norm else z


# ---------------------------------------------------------------------------
# desk-scale reference configs
# ---------------------------------------------------------------------------


def _ssm_specs(n: int, width: int) -> list[LayerSpec]:
    return [LayerSpec("ssm", width=width, heads=4, d_state=16, expand=2) for _ in range(n)]


def _attn_mlp_specs(n_blocks: int, width: int, heads: int = 4, window: int = 128):
    specs = []
    for _ in range(n_blocks):
        specs.append(LayerSpec("attention", width=width, heads=heads, window=window))
        specs.append(LayerSpec("gated_mlp", width=width))
    return specs


def desk_1stage(chunker: str = "dc", target_ratio: int = 6) -> ModelConfig:
    """1-stage reference: 2 recurrent layers at 64 around 2 attention+MLP
    blocks at 96, compression target 6."""
    cfg = ModelConfig(
        stages=[
            StageSpec(
                width=64,
                target_ratio=target_ratio,
                encoder=_ssm_specs(2, 64),
                decoder=_ssm_specs(2, 64),
                chunker=chunker,
            )
        ],
        main=_attn_mlp_specs(2, 96),
        main_width=96,
    )
    cfg.validate()
    return cfg


def desk_2stage() -> ModelConfig:
    """2-stage reference: targets (3, 3), widths 64/64/96."""
    cfg = ModelConfig(
        stages=[
            StageSpec(
                width=64,
                target_ratio=3,
                encoder=_ssm_specs(2, 64),
                decoder=_ssm_specs(2, 64),
            ),
            StageSpec(
                width=64,
                target_ratio=3,
                encoder=_ssm_specs(2, 64),
                decoder=_ssm_specs(2, 64),
            ),
        ],
        main=_attn_mlp_specs(2, 96),
        main_width=96,
    )
    cfg.validate()
    return cfg


PRESETS = {"desk1": desk_1stage, "desk2": desk_2stage}
