"""Stateful autoregressive generation with per-byte dynamic compute.

A session holds, for every stage: the encoder/decoder layer states, the
routing key of the most recent position, and the most recent smoothed
vector. Stepping a byte always runs the outer encoder and decoder; inner
stages run only when the routing module fires a boundary, which is what
makes per-byte compute data-dependent. The stepped path must agree with
full training-mode forwards to within float32 accumulation noise; the
equivalence tests enforce < 1e-4 on logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import chunking as C
from .model import HNet, Stage
from .tensor import DTYPE


def _as_byte_array(seq) -> np.ndarray:
    if isinstance(seq, (bytes, bytearray)):
        return np.frombuffer(bytes(seq), dtype=np.uint8).astype(np.int64)
    return np.asarray(seq, dtype=np.int64)


@dataclass
class DCState:
    """Dynamic-chunking state for one stage."""

    last_key: Optional[np.ndarray] = None
    last_zbar: Optional[np.ndarray] = None
    chunk_count: int = 0
    position: int = 0  # rows seen at this stage (drives the pool chunker)


@dataclass
class MainState:
    blocks: list


@dataclass
class StageState:
    enc: list
    dc: DCState
    inner: Union["StageState", MainState]
    dec: list


@dataclass
class StepDiagnostics:
    """Which stages fired and their boundary probabilities for one byte."""

    fired: list  # fired[s]: stage s routed this position into stage s+1
    p: list
    blocks_evaluated: int = 0


@dataclass
class SamplingConfig:
    temperature: float = 1.0
    top_k: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class InferenceSession:
    """Single-sequence stepping; distinct sessions are independent."""

    def __init__(self, model: HNet, sampling: Optional[SamplingConfig] = None):
        self.model = model
        self.sampling = sampling or SamplingConfig()
        self.rng = np.random.default_rng(self.sampling.seed)
        self.states = self._fresh_stage_state(0)
        self.prev_byte: Optional[int] = None
        self.n_seen = 0

    def _fresh_stage_state(self, s: int) -> StageState:
        model = self.model
        if s == len(model.stages):
            return MainState(blocks=[blk.init_state() for blk in model.main])
        stage = model.stages[s]
        return StageState(
            enc=[blk.init_state() for blk in stage.encoder],
            dc=DCState(),
            inner=self._fresh_stage_state(s + 1),
            dec=[blk.init_state() for blk in stage.decoder],
        )

    # -- stepping ---------------------------------------------------------

    def step(self, byte: int) -> tuple[np.ndarray, StepDiagnostics]:
        """Advance one byte; returns (next-byte logits, diagnostics)."""
        diag = StepDiagnostics(
            fired=[False] * len(self.model.stages), p=[None] * len(self.model.stages)
        )
        row = self.model.embed.step(int(byte))
        if not self.model.stages:  # isotropic degenerate case
            out = self._main_step(row, diag)
        else:
            out = self._stage_step(0, row, int(byte), diag)
        self.prev_byte = int(byte)
        self.n_seen += 1
        return self.model.head.step(out), diag

    def _main_step(self, row: np.ndarray, diag: StepDiagnostics) -> np.ndarray:
        model = self.model
        ms = self._state_at(len(model.stages))
        for blk, bst in zip(model.main, ms.blocks):
            row = blk.step(row, bst)
            diag.blocks_evaluated += 1
        return model.main_norm.step(row) if model.config.network_norm else row

    def _decide_step(self, s: int, stage: Stage, x_hat: np.ndarray, raw_byte, dc: DCState):
        if stage.spec_.chunker == "pool":
            k = stage.spec_.pool_k or stage.spec_.target_ratio
            b = dc.position % k == 0
            return np.float32(1.0 if b else 0.0), b
        if stage.spec_.chunker == "space":
            b = self.prev_byte is None or C.is_space_like(self.prev_byte)
            return np.float32(1.0 if b else 0.0), b
        p, b, key = stage.router.step(x_hat, dc.last_key)
        dc.last_key = key
        return p, b

    def _stage_step(self, s: int, row: np.ndarray, raw_byte: int, diag: StepDiagnostics):
        model = self.model
        st = self._state_at(s)
        stage = model.stages[s]
        for blk, bst in zip(stage.encoder, st.enc):
            row = blk.step(row, bst)
            diag.blocks_evaluated += 1
        x_hat = stage.enc_norm.step(row) if model.config.network_norm else row

        p, fired = self._decide_step(s, stage, x_hat, raw_byte, st.dc)
        diag.p[s] = float(p)
        diag.fired[s] = bool(fired)
        st.dc.position += 1

        if fired:
            inner_in = x_hat
            if stage.expand_w is not None:
                inner_in = np.concatenate([x_hat, stage.expand_w.data])
            if s + 1 == len(model.stages):
                z = self._main_step(inner_in, diag)
            else:
                z = self._stage_step(s + 1, inner_in, raw_byte, diag)
            z_hat = z[: stage.spec_.width]
            prev = (
                st.dc.last_zbar
                if st.dc.last_zbar is not None
                else np.zeros(stage.spec_.width, dtype=DTYPE)
            )
            zbar = p * z_hat + (np.float32(1.0) - p) * prev
            st.dc.last_zbar = zbar.astype(DTYPE)
            st.dc.chunk_count += 1
        else:
            zbar = st.dc.last_zbar
        # forward pass multiplies by STE(confidence) == exactly 1
        z = zbar + stage.residual.step(x_hat)
        for blk, bst in zip(stage.decoder, st.dec):
            z = blk.step(z, bst)
            diag.blocks_evaluated += 1
        return stage.dec_norm.step(z) if model.config.network_norm else z

    def _state_at(self, s: int):
        st = self.states
        for _ in range(s):
            st = st.inner
        return st

    # -- prefill / generation ---------------------------------------------

    def prefill(self, byte_seq) -> Optional[np.ndarray]:
        """Advance over a prompt; returns logits after the last byte."""
        logits = None
        for byte in _as_byte_array(byte_seq):
            logits, _ = self.step(int(byte))
        return logits

    def sample(self, logits: np.ndarray) -> int:
        cfg = self.sampling
        if cfg.temperature == 0.0:
            return int(np.argmax(logits))
        scaled = logits.astype(np.float64) / cfg.temperature
        if cfg.top_k is not None and cfg.top_k < scaled.size:
            cutoff = np.partition(scaled, -cfg.top_k)[-cfg.top_k]
            scaled = np.where(scaled >= cutoff, scaled, -np.inf)
        scaled -= scaled.max()
        probs = np.exp(scaled)
        probs /= probs.sum()
        return int(self.rng.choice(scaled.size, p=probs))

    def generate(
        self, prompt, max_bytes: int
    ) -> tuple[bytes, list[dict]]:
        """Autoregressive sampling with a per-byte compute trace."""
        prompt = _as_byte_array(prompt)
        if prompt.size == 0:
            raise ValueError("generate needs at least one prompt byte")
        logits = self.prefill(prompt)
        out = []
        trace = []
        for _ in range(max_bytes):
            nxt = self.sample(logits)
            out.append(nxt)
            logits, diag = self.step(nxt)
            trace.append(
                {
                    "byte": nxt,
                    "fired": list(diag.fired),
                    "p": [None if v is None else round(v, 6) for v in diag.p],
                    "blocks": diag.blocks_evaluated,
                }
            )
        return bytes(out), trace
