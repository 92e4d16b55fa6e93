"""Causal sequence- and channel-mixing layers.

Three mixer kinds cover every network in the hierarchy:

* sliding-window causal attention with rotary positions,
* a simplified selective state-space layer (gated recurrence with
  input-dependent per-head decay; a stand-in for heavier SSM kernels
  that keeps the same ~6*D^2 parameter budget and compression-biased
  recurrent behavior),
* a gated MLP.

Each mixer is wrapped in a pre-norm residual block. Every layer has a
full-sequence differentiable ``forward`` and a single-position numpy
``step`` used by autoregressive inference; the two are held equal by the
stepped-equivalence tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels as K
from . import tensor as T
from .tensor import DTYPE, DiffTensor

RMS_EPS = 1e-5
CONV_WINDOW = 4
VOCAB = 256


@dataclass
class LayerSpec:
    """Shape of one sequence-mixing layer."""

    kind: str  # attention | ssm | gated_mlp
    width: int
    heads: int = 4
    window: int = 128  # attention positions visible, including self; 0 = unbounded
    d_state: int = 16
    expand: int = 2
    ffw_size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("attention", "ssm", "gated_mlp"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "attention":
            if self.width % self.heads != 0:
                raise ValueError(
                    f"attention width {self.width} not divisible by heads {self.heads}"
                )
            if (self.width // self.heads) % 2 != 0:
                raise ValueError("head_dim must be even for rotary positions")
            if self.window < 0:
                raise ValueError("window must be >= 1, or 0 for unbounded")
        if self.kind == "ssm":
            d_inner = self.expand * self.width
            if d_inner % self.heads != 0:
                raise ValueError(
                    f"ssm inner width {d_inner} not divisible by heads {self.heads}"
                )
        if self.kind == "gated_mlp" and self.ffw_size is None:
            # 3*D*ffw ~= 8*D^2: the usual gated-MLP budget.
            self.ffw_size = int(round(8 * self.width / 3))

    @property
    def head_dim(self) -> int:
        if self.kind == "attention":
            return self.width // self.heads
        return (self.expand * self.width) // self.heads

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "width": self.width,
            "heads": self.heads,
            "window": self.window,
            "d_state": self.d_state,
            "expand": self.expand,
            "ffw_size": self.ffw_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled into +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(DTYPE)


class Module:
    """Tiny parameter container: children + named leaf tensors."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            key = f"{prefix}.{name}" if prefix else name
            if isinstance(val, DiffTensor):
                yield key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(key)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}")

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def _param(rng, shape, std=0.02) -> DiffTensor:
    return DiffTensor(trunc_normal(rng, shape, std), requires_grad=True)


def _zeros_param(shape) -> DiffTensor:
    return DiffTensor(np.zeros(shape, dtype=DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# norms / embeddings / head
# ---------------------------------------------------------------------------


class RMSNorm(Module):
    def __init__(self, width: int):
        self.weight = DiffTensor(np.ones(width, dtype=DTYPE), requires_grad=True)
        self._inv_width = 1.0 / width

    def forward(self, x: DiffTensor) -> DiffTensor:
        ms = T.mul(T.sum_(T.mul(x, x), axis=-1, keepdims=True), self._inv_width)
        return T.mul(T.mul(x, T.rsqrt(T.add(ms, RMS_EPS))), self.weight)

    def step(self, row: np.ndarray) -> np.ndarray:
        # same float32 operation order as forward, for stepped equivalence
        ms = np.sum(row * row, dtype=DTYPE) * np.float32(self._inv_width)
        inv = np.float32(1.0) / np.sqrt(ms + np.float32(RMS_EPS))
        return (row * inv) * self.weight.data


class Embedding(Module):
    def __init__(self, rng, width: int, vocab: int = VOCAB):
        self.table = _param(rng, (vocab, width))

    def forward(self, ids) -> DiffTensor:
        return T.segment_select(self.table, np.asarray(ids, dtype=np.int64))

    def step(self, byte: int) -> np.ndarray:
        return self.table.data[byte]


class LMHead(Module):
    def __init__(self, rng, width: int, vocab: int = VOCAB):
        self.weight = _param(rng, (width, vocab))

    def forward(self, x: DiffTensor) -> DiffTensor:
        return T.matmul(x, self.weight)

    def step(self, row: np.ndarray) -> np.ndarray:
        return row @ self.weight.data


# ---------------------------------------------------------------------------
# rotary positions
# ---------------------------------------------------------------------------


def _rotary_tables(head_dim: int, pos0: int, length: int):
    inv_freq = (10000.0 ** (-np.arange(0, head_dim, 2) / head_dim)).astype(np.float64)
    pos = np.arange(pos0, pos0 + length, dtype=np.float64)
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(DTYPE), np.sin(ang).astype(DTYPE)


def _rotate_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate even/odd channel pairs; x is [L, H, hd], tables [L, hd/2]."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


def rotary(x: DiffTensor, pos0: int = 0) -> DiffTensor:
    """Rotary position encoding on [L, H, hd]; backward is the inverse rotation."""
    cos, sin = _rotary_tables(x.shape[-1], pos0, x.shape[0])
    data = _rotate_np(x.data, cos, sin)

    def vjp(g):
        T.accumulate_grad(x, _rotate_np(g, cos, -sin))

    return T.record_op(data, (x,), vjp)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@dataclass
class AttnState:
    """Ring buffer of the last `window` rotated keys and values."""

    k: np.ndarray  # [n<=W, H, hd]
    v: np.ndarray
    pos: int  # absolute position of the next row


class SlidingWindowAttention(Module):
    def __init__(self, rng, spec: LayerSpec):
        self.spec_ = spec
        d, hh = spec.width, spec.heads * spec.head_dim
        self.wq = _param(rng, (d, hh))
        self.wk = _param(rng, (d, hh))
        self.wv = _param(rng, (d, hh))
        self.wo = _param(rng, (hh, d))

    def _mask(self, length: int) -> np.ndarray:
        i = np.arange(length)[:, None]
        j = np.arange(length)[None, :]
        allowed = j <= i
        if self.spec_.window > 0:
            allowed &= j > i - self.spec_.window
        m = np.where(allowed, 0.0, -np.inf).astype(DTYPE)
        return m

    def forward(self, x: DiffTensor) -> DiffTensor:
        s = self.spec_
        L = x.shape[0]
        h, hd = s.heads, s.head_dim
        q = rotary(T.reshape(T.matmul(x, self.wq), (L, h, hd)))
        k = rotary(T.reshape(T.matmul(x, self.wk), (L, h, hd)))
        v = T.reshape(T.matmul(x, self.wv), (L, h, hd))
        qh = T.permute(q, (1, 0, 2))  # [H, L, hd]
        kh = T.permute(k, (1, 2, 0))  # [H, hd, L]
        vh = T.permute(v, (1, 0, 2))
        scores = T.mul(T.bmm(qh, kh), 1.0 / math.sqrt(hd))
        scores = T.add(scores, DiffTensor(self._mask(L)))
        attn = T.softmax_last(scores)
        mixed = T.bmm(attn, vh)  # [H, L, hd]
        out = T.reshape(T.permute(mixed, (1, 0, 2)), (L, h * hd))
        return T.matmul(out, self.wo)

    def init_state(self) -> AttnState:
        s = self.spec_
        return AttnState(
            k=np.zeros((0, s.heads, s.head_dim), dtype=DTYPE),
            v=np.zeros((0, s.heads, s.head_dim), dtype=DTYPE),
            pos=0,
        )

    def step(self, row: np.ndarray, st: AttnState) -> np.ndarray:
        s = self.spec_
        h, hd = s.heads, s.head_dim
        cos, sin = _rotary_tables(hd, st.pos, 1)
        q = _rotate_np((row @ self.wq.data).reshape(1, h, hd), cos, sin)[0]
        k = _rotate_np((row @ self.wk.data).reshape(1, h, hd), cos, sin)[0]
        v = (row @ self.wv.data).reshape(h, hd)
        st.k = np.concatenate([st.k, k[None]], axis=0)
        st.v = np.concatenate([st.v, v[None]], axis=0)
        if s.window > 0 and st.k.shape[0] > s.window:
            st.k = st.k[-s.window :]
            st.v = st.v[-s.window :]
        st.pos += 1
        # [n, H] scores against the cached window
        logits = np.einsum("hd,nhd->nh", q, st.k, dtype=np.float32) / np.float32(
            math.sqrt(hd)
        )
        w = np.exp(logits - logits.max(axis=0, keepdims=True))
        w /= w.sum(axis=0, keepdims=True)
        mixed = np.einsum("nh,nhd->hd", w.astype(DTYPE), st.v, dtype=np.float32)
        return mixed.reshape(h * hd).astype(DTYPE) @ self.wo.data


# ---------------------------------------------------------------------------
# simplified selective SSM
# ---------------------------------------------------------------------------


@dataclass
class SSMState:
    """Recurrent state plus the short-convolution tail."""

    conv_tail: np.ndarray  # [CONV_WINDOW-1, d_inner], oldest first
    s: np.ndarray  # [H, N, P]


def ssm_scan(
    u3: DiffTensor, a: DiffTensor, b: DiffTensor, c: DiffTensor, s0: np.ndarray
) -> DiffTensor:
    """Differentiable selective-state scan over [L, H, P] activations."""
    y, states = K.ssm_scan_fwd(u3.data, a.data, b.data, c.data, s0)

    def vjp(g):
        du, da, db, dc, _ = K.ssm_scan_bwd(
            np.ascontiguousarray(g), u3.data, a.data, b.data, c.data, s0, states
        )
        T.accumulate_grad(u3, du)
        T.accumulate_grad(a, da)
        T.accumulate_grad(b, db)
        T.accumulate_grad(c, dc)

    return T.record_op(y, (u3, a, b, c), vjp)


class SelectiveSSM(Module):
    """Gated recurrence: S_t = a_t * S_{t-1} + b_t u_t^T, y_t = c_t^T S_t.

    The decay a_t = sigmoid(w_a x_t + bias) is per head; b/c are shared
    d_state projections. A depthwise causal convolution (window 4)
    precedes the recurrence and silu(z) gates the readout.
    """

    def __init__(self, rng, spec: LayerSpec):
        self.spec_ = spec
        d = spec.width
        di = spec.expand * d
        n, h = spec.d_state, spec.heads
        self.w_x = _param(rng, (d, di))
        self.w_z = _param(rng, (d, di))
        self.w_a = _param(rng, (d, h))
        # decay bias spread across timescales: sigmoid(bias) in ~[0.8, 0.98]
        a0 = np.linspace(0.8, 0.98, h)
        self.bias_a = DiffTensor(np.log(a0 / (1 - a0)), requires_grad=True)
        self.w_b = _param(rng, (d, n))
        self.w_c = _param(rng, (d, n))
        self.w_conv = _param(rng, (CONV_WINDOW, di), std=0.1)
        self.bias_conv = _zeros_param(di)
        self.d_skip = DiffTensor(np.ones(h, dtype=DTYPE), requires_grad=True)
        self.w_out = _param(rng, (di, d))

    def _conv(self, u: DiffTensor) -> DiffTensor:
        taps = []
        for j in range(CONV_WINDOW):
            w_j = T.slice_rows(self.w_conv, j, j + 1)  # [1, di] broadcasts over rows
            taps.append(T.mul(T.shift_rows(u, j), w_j))
        acc = taps[0]
        for t in taps[1:]:
            acc = T.add(acc, t)
        return T.add(acc, self.bias_conv)

    def forward(self, x: DiffTensor) -> DiffTensor:
        s = self.spec_
        L = x.shape[0]
        h, p, n = s.heads, s.head_dim, s.d_state
        u = T.silu(self._conv(T.matmul(x, self.w_x)))
        z = T.matmul(x, self.w_z)
        a = T.sigmoid(T.add(T.matmul(x, self.w_a), self.bias_a))
        b = T.matmul(x, self.w_b)
        c = T.matmul(x, self.w_c)
        u3 = T.reshape(u, (L, h, p))
        s0 = np.zeros((h, n, p), dtype=DTYPE)
        y3 = ssm_scan(u3, a, b, c, s0)
        y3 = T.add(y3, T.mul(u3, T.reshape(self.d_skip, (1, h, 1))))
        y = T.reshape(y3, (L, h * p))
        return T.matmul(T.mul(y, T.silu(z)), self.w_out)

    def init_state(self) -> SSMState:
        s = self.spec_
        di = s.expand * s.width
        return SSMState(
            conv_tail=np.zeros((CONV_WINDOW - 1, di), dtype=DTYPE),
            s=np.zeros((s.heads, s.d_state, s.head_dim), dtype=DTYPE),
        )

    def step(self, row: np.ndarray, st: SSMState) -> np.ndarray:
        # accumulation order mirrors forward() exactly: taps left to right,
        # then the shared step kernel for the recurrence
        s = self.spec_
        h, p = s.heads, s.head_dim
        u_pre = row @ self.w_x.data
        z = row @ self.w_z.data
        win = np.concatenate([st.conv_tail, u_pre[None]], axis=0)  # [4, di]
        u = self.w_conv.data[0] * win[3]
        for j in range(1, CONV_WINDOW):
            u = u + self.w_conv.data[j] * win[3 - j]
        u = u + self.bias_conv.data
        sig = np.float32(1.0) / (np.float32(1.0) + np.exp(-u))
        u = u * sig
        st.conv_tail = win[1:]
        a = np.float32(1.0) / (np.float32(1.0) + np.exp(-(row @ self.w_a.data + self.bias_a.data)))
        b = row @ self.w_b.data
        c = row @ self.w_c.data
        u3 = np.ascontiguousarray(u.reshape(h, p))
        y3 = K.ssm_step_fwd(u3, a, b, c, st.s)
        y3 = y3 + u3 * self.d_skip.data[:, None]
        y = y3.reshape(h * p)
        gate = z * (np.float32(1.0) / (np.float32(1.0) + np.exp(-z)))
        return (y * gate) @ self.w_out.data


# ---------------------------------------------------------------------------
# gated MLP
# ---------------------------------------------------------------------------


class GatedMLP(Module):
    def __init__(self, rng, spec: LayerSpec):
        self.spec_ = spec
        d, f = spec.width, spec.ffw_size
        self.w_gate = _param(rng, (d, f))
        self.w_up = _param(rng, (d, f))
        self.w_down = _param(rng, (f, d))

    def forward(self, x: DiffTensor) -> DiffTensor:
        return T.matmul(
            T.mul(T.silu(T.matmul(x, self.w_gate)), T.matmul(x, self.w_up)),
            self.w_down,
        )

    def init_state(self):
        return None

    def step(self, row: np.ndarray, st=None) -> np.ndarray:
        g = row @ self.w_gate.data
        g = g * (1.0 / (1.0 + np.exp(-g))).astype(DTYPE)
        return (g * (row @ self.w_up.data)) @ self.w_down.data


# ---------------------------------------------------------------------------
# pre-norm residual wrapper
# ---------------------------------------------------------------------------

_MIXERS = {
    "attention": SlidingWindowAttention,
    "ssm": SelectiveSSM,
    "gated_mlp": GatedMLP,
}


@dataclass
class BlockState:
    mixer: object


class ResidualBlock(Module):
    """x + mixer(rmsnorm(x)); the unit every network stacks."""

    def __init__(self, rng, spec: LayerSpec):
        self.spec_ = spec
        self.norm = RMSNorm(spec.width)
        self.mixer = _MIXERS[spec.kind](rng, spec)

    def forward(self, x: DiffTensor) -> DiffTensor:
        return T.add(x, self.mixer.forward(self.norm.forward(x)))

    def init_state(self) -> BlockState:
        return BlockState(mixer=self.mixer.init_state())

    def step(self, row: np.ndarray, st: BlockState) -> np.ndarray:
        return row + self.mixer.step(self.norm.step(row), st.mixer)


def build_blocks(rng, specs: list[LayerSpec]) -> list[ResidualBlock]:
    return [ResidualBlock(rng, s) for s in specs]
