"""Learned dynamic chunking plus the non-learned baseline chunkers.

The pipeline per stage: a routing module scores adjacent-representation
dissimilarity into boundary probabilities, a downsampler keeps the
boundary-marked rows, a smoothing module interpolates the compressed
vectors by confidence, and an upsampler expands back to full resolution
behind a straight-through confidence multiplier. A ratio loss steers the
selected fraction toward 1/N.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels as K
from . import tensor as T
from .tensor import DTYPE, DiffTensor

BOUNDARY_THRESHOLD = 0.5


@dataclass
class BoundaryDecision:
    """Per-position boundary probabilities and hard indicators.

    ``p`` carries gradient; ``b`` is the thresholded constant. The first
    position is a boundary with probability 1 by convention, so every
    non-empty sequence produces at least one chunk.
    """

    p: DiffTensor  # [L], values in [0, 1], p[0] == 1
    b: np.ndarray  # [L] bool
    selected_idx: np.ndarray  # strictly increasing positions where b

    @classmethod
    def from_probs(cls, p: DiffTensor) -> "BoundaryDecision":
        b = p.data >= BOUNDARY_THRESHOLD
        if not b[0]:
            raise ValueError("first position must be a boundary (p[0] == 1)")
        return cls(p=p, b=b, selected_idx=np.flatnonzero(b))

    @property
    def num_chunks(self) -> int:
        return int(self.selected_idx.size)

    def fraction_selected(self) -> float:
        return float(self.b.mean())


@dataclass
class ChunkedSequence:
    """Boundary-selected vectors with their compressed probabilities."""

    vectors: DiffTensor  # [M, D]
    P: DiffTensor  # [M], P[j] = p[selected_idx[j]]
    source_idx: np.ndarray


class RoutingModule:
    """Boundary scoring from cosine similarity of adjacent projections.

    Projections start at identity so early boundary scores reflect raw
    adjacent-representation change rather than noise.
    """

    def __init__(self, width: int):
        eye = np.eye(width, dtype=DTYPE)
        self.wq = DiffTensor(eye.copy(), requires_grad=True)
        self.wk = DiffTensor(eye.copy(), requires_grad=True)
        self.width = width

    def named_parameters(self, prefix: str = ""):
        yield (f"{prefix}.wq" if prefix else "wq"), self.wq
        yield (f"{prefix}.wk" if prefix else "wk"), self.wk

    def forward(self, x_hat: DiffTensor) -> BoundaryDecision:
        dec, _, _ = route(x_hat, self.wq, self.wk)
        return dec

    def step(self, row: np.ndarray, last_key: Optional[np.ndarray]):
        """One-position routing: returns (p, b, new_key).

        Mirrors the float32 operation order of the full-sequence path so
        thresholding never disagrees between stepped and batch modes.
        """
        q = row @ self.wq.data
        k = row @ self.wk.data
        if last_key is None:
            return np.float32(1.0), True, k
        dot = np.sum(q * last_key, dtype=DTYPE)
        nq = np.sqrt(np.sum(q * q, dtype=DTYPE)) + T.COSINE_EPS
        nk = np.sqrt(np.sum(last_key * last_key, dtype=DTYPE)) + T.COSINE_EPS
        cos = dot / (nq * nk)
        p = np.clip((np.float32(1.0) - cos) * np.float32(0.5), 0.0, 1.0)
        return np.float32(p), bool(p >= BOUNDARY_THRESHOLD), k


def route(
    x_hat: DiffTensor, wq: DiffTensor, wk: DiffTensor
) -> tuple[BoundaryDecision, DiffTensor, DiffTensor]:
    """Boundary probabilities p_t = (1 - cos(q_t, k_{t-1})) / 2, p_0 = 1.

    Returns the decision plus the full q and k projections (the last key
    row seeds inference state). Gradient reaches wq, wk and x_hat through
    p only; the indicators are constants.
    """
    L = x_hat.shape[0]
    if L < 1:
        raise ValueError("route: empty sequence")
    q = T.matmul(x_hat, wq)
    k = T.matmul(x_hat, wk)
    one = DiffTensor(np.ones(1, dtype=DTYPE))
    if L == 1:
        return BoundaryDecision.from_probs(one), q, k
    cos = T.cosine_similarity_rows(T.slice_rows(q, 1, L), T.slice_rows(k, 0, L - 1))
    p_rest = T.clip01(T.mul(T.sub(1.0, cos), 0.5))
    p = T.concat_rows([one, p_rest])
    return BoundaryDecision.from_probs(p), q, k


def downsample(
    x_hat: DiffTensor, decision: BoundaryDecision, mode: str = "select"
) -> ChunkedSequence:
    """Compress to the boundary-marked rows.

    ``select`` keeps the marked vectors; ``mean``/``max`` pool each run of
    positions from one boundary up to the next. Probabilities are always
    compressed by selection.
    """
    idx = decision.selected_idx
    P = T.segment_select(decision.p, idx)
    if mode == "select":
        vectors = T.segment_select(x_hat, idx)
    elif mode == "mean":
        vectors = _mean_pool_runs(x_hat, idx)
    elif mode == "max":
        vectors = _max_pool_runs(x_hat, idx)
    else:
        raise ValueError(f"unknown downsample mode {mode!r}")
    return ChunkedSequence(vectors=vectors, P=P, source_idx=idx)


def _run_bounds(idx: np.ndarray, L: int) -> np.ndarray:
    return np.append(idx, L)


def _mean_pool_runs(x: DiffTensor, idx: np.ndarray) -> DiffTensor:
    L = x.shape[0]
    bounds = _run_bounds(idx, L)
    A = np.zeros((idx.size, L), dtype=DTYPE)
    for j in range(idx.size):
        lo, hi = bounds[j], bounds[j + 1]
        A[j, lo:hi] = 1.0 / (hi - lo)
    return T.matmul(DiffTensor(A), x)


def _max_pool_runs(x: DiffTensor, idx: np.ndarray) -> DiffTensor:
    L, D = x.shape
    bounds = _run_bounds(idx, L)
    M = idx.size
    out = np.empty((M, D), dtype=DTYPE)
    arg = np.empty((M, D), dtype=np.int64)
    for j in range(M):
        lo, hi = bounds[j], bounds[j + 1]
        seg = x.data[lo:hi]
        a = seg.argmax(axis=0)
        arg[j] = a + lo
        out[j] = seg[a, np.arange(D)]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (arg.reshape(-1), np.tile(np.arange(D), M)), g.reshape(-1))
        T.accumulate_grad(x, full)

    return T.record_op(out, (x,), vjp)


def smooth(
    z_hat: DiffTensor, P: DiffTensor, z0: Optional[np.ndarray] = None
) -> DiffTensor:
    """Confidence-weighted moving average over compressed vectors.

    zbar_t = P_t * zhat_t + (1 - P_t) * zbar_{t-1}. A fresh sequence has
    P[0] == 1, which makes the initial state irrelevant; ``z0`` is for
    stateful continuation.
    """
    if z0 is None:
        if P.data[0] != 1.0:
            raise ValueError("smooth: P[0] must be 1.0 when no initial state is given")
        z0 = np.zeros(z_hat.shape[1], dtype=DTYPE)
    zbar = K.ema_scan_fwd(z_hat.data, P.data, z0)

    def vjp(g):
        dz, dp, _ = K.ema_scan_bwd(
            np.ascontiguousarray(g), z_hat.data, P.data, z0, zbar
        )
        T.accumulate_grad(z_hat, dz)
        T.accumulate_grad(P, dp)

    return T.record_op(zbar, (z_hat, P), vjp)


def upsample(z_bar: DiffTensor, decision: BoundaryDecision) -> DiffTensor:
    """Expand each chunk to its positions behind a straight-through gate.

    Output_t = STE(c_t) * ztilde_t where ztilde repeats the most recent
    chunk and c_t is p_t at boundaries, 1 - p_t elsewhere. The forward
    multiplier is exactly 1 (c + stopgradient(1 - c) rounds to 1.0 in
    float32 for any c in [0, 1]); backward feeds <upstream, ztilde> into
    the confidence path.
    """
    b = decision.b
    if decision.num_chunks != z_bar.shape[0]:
        raise ValueError(
            f"upsample: {z_bar.shape[0]} chunks vs {decision.num_chunks} boundaries"
        )
    chunk_of_pos = np.cumsum(b) - 1  # b[0]=1 so indices start at 0
    ztilde = T.segment_select(z_bar, chunk_of_pos)
    bmask = DiffTensor(b.astype(DTYPE))
    c = T.add(
        T.mul(decision.p, bmask), T.mul(T.sub(1.0, decision.p), T.sub(1.0, bmask))
    )
    ste = T.add(c, T.stop_gradient(T.sub(1.0, c)))
    return T.mul(ztilde, T.reshape(ste, (b.size, 1)))


def confidence(decision: BoundaryDecision) -> np.ndarray:
    """c_t values (forward diagnostics only; gradients flow in upsample)."""
    p = decision.p.data
    return np.where(decision.b, p, 1.0 - p).astype(DTYPE)


def ratio_loss(decision: BoundaryDecision, N: int) -> DiffTensor:
    """Compression steering loss; minimum 1 at F = G = 1/N.

    F (selected fraction) enters as a constant, so only the mean boundary
    probability G carries gradient. Values below 1 are possible when
    F != G and must not be clamped.
    """
    if N < 2:
        raise ValueError("ratio target N must be >= 2")
    F = decision.fraction_selected()
    G = T.mean(decision.p)
    inner = T.add(T.mul(G, (N - 1.0) * F), T.mul(T.sub(1.0, G), 1.0 - F))
    return T.mul(inner, N / (N - 1.0))


# ---------------------------------------------------------------------------
# non-learned baseline chunkers
# ---------------------------------------------------------------------------

# Delimiter-style bytes: anything below '0' plus the ASCII punctuation
# ranges. The boundary lands on the byte *after* a delimiter, so words
# start chunks.
_SPACE_LIKE = np.zeros(256, dtype=bool)
_SPACE_LIKE[:0x30] = True
_SPACE_LIKE[0x3A:0x41] = True
_SPACE_LIKE[0x5B:0x61] = True
_SPACE_LIKE[0x7B:0x7F] = True


def is_space_like(byte: int) -> bool:
    return bool(_SPACE_LIKE[byte])


def _hard_decision(b: np.ndarray) -> BoundaryDecision:
    p = DiffTensor(b.astype(DTYPE))
    return BoundaryDecision(p=p, b=b, selected_idx=np.flatnonzero(b))


def pool_chunker(length: int, k: int) -> BoundaryDecision:
    """Fixed-stride boundaries at positions 0, k, 2k, ..."""
    if k < 1:
        raise ValueError("pool stride must be >= 1")
    b = np.zeros(length, dtype=bool)
    b[::k] = True
    return _hard_decision(b)


def spacelike_chunker(byte_seq: np.ndarray) -> BoundaryDecision:
    """Boundary on position 0 and on every byte following a delimiter."""
    byte_seq = np.asarray(byte_seq, dtype=np.uint8)
    b = np.zeros(byte_seq.size, dtype=bool)
    b[0] = True
    if byte_seq.size > 1:
        b[1:] = _SPACE_LIKE[byte_seq[:-1]]
        b[0] = True
    return _hard_decision(b)
