"""Dense float32 tensors with taped reverse-mode differentiation.

Everything trainable in this package flows through :class:`DiffTensor`.
Tensors are row-major float32, rank <= 3 (batch x length x width is the
largest layout any operation needs). Gradients are computed by recording
primitive operations on an explicit :class:`Tape` and replaying the tape
in exact reverse execution order.

Typical use::

    tape = Tape()
    with tape:
        loss = some_scalar_function(x)
    tape.backward(loss)
    # x.grad now holds dloss/dx
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

DTYPE = np.float32

# Guard added to each norm in cosine similarity; the boundary score is
# undefined for zero vectors otherwise.
COSINE_EPS = 1e-6

MAX_RANK = 3

ArrayLike = Union["DiffTensor", np.ndarray, float, int, list]


class Tape:
    """Ordered record of executed primitives for one backward pass.

    Nodes are appended in execution order and replayed strictly in
    reverse, so every consumer of a tensor has already deposited its
    gradient contribution by the time the producing node runs.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[DiffTensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: "DiffTensor") -> None:
        """Seed d(loss)/d(loss) = 1 and run all recorded VJPs in reverse.

        A tape is single-use: running backward twice would accumulate
        gradients twice.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, vjp in reversed(self._nodes):
            if out.grad is not None:
                vjp(out.grad)


_TAPES: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


class DiffTensor:
    """Shape-carrying float32 array that can participate in backprop.

    ``grad`` is lazily allocated: tensors that never receive a gradient
    contribution keep ``grad is None``, which is the exact-zero case.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} > {MAX_RANK} not supported")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: ArrayLike, requires_grad: bool = False) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x, requires_grad=requires_grad)


def _accum(t: DiffTensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a consumer's grad buffer
        t.grad = np.array(g, dtype=DTYPE)
    else:
        t.grad += g


def _accum_new(t: DiffTensor, g: np.ndarray) -> None:
    """Accumulate a freshly allocated gradient (caller relinquishes g)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def record_op(
    data: np.ndarray,
    inputs: Sequence[DiffTensor],
    vjp: Callable[[np.ndarray], None],
) -> DiffTensor:
    """Create an op output, registering ``vjp`` on the active tape.

    ``vjp`` receives d(loss)/d(output) and must accumulate into the
    inputs' ``grad`` via :func:`accumulate_grad`. This is the extension
    point used by the model layers for their custom scans.
    """
    tape = active_tape()
    needs = tape is not None and any(i.requires_grad for i in inputs)
    out = DiffTensor(data, requires_grad=needs)
    if needs:
        tape._nodes.append((out, vjp))
    return out


# Exported alias for custom ops living outside this module.
accumulate_grad = _accum


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float))


def _accum_bcast(t: DiffTensor, g: np.ndarray, fresh: bool) -> None:
    """Route a possibly broadcast gradient to the cheapest accumulator."""
    if g.shape == t.shape:
        (_accum_new if fresh else _accum)(t, g)
    else:
        _accum_new(t, np.ascontiguousarray(_unbroadcast(g, t.shape)))


def add(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return record_op(a.data + DTYPE(b), (a,), lambda g: _accum(a, g))
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        _accum_bcast(a, g, fresh=False)
        _accum_bcast(b, g, fresh=False)

    return record_op(data, (a, b), vjp)


def sub(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return record_op(a.data - DTYPE(b), (a,), lambda g: _accum(a, g))
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        _accum_bcast(a, g, fresh=False)
        _accum_bcast(b, -g, fresh=True)

    return record_op(data, (a, b), vjp)


def mul(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    if _is_scalar(b):
        a = as_tensor(a)
        k = DTYPE(b)
        return record_op(a.data * k, (a,), lambda g: _accum_new(a, g * k))
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        _accum_bcast(a, g * b.data, fresh=True)
        _accum_bcast(b, g * a.data, fresh=True)

    return record_op(data, (a, b), vjp)


def div(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def vjp(g):
        _accum_bcast(a, g / b.data, fresh=True)
        _accum_bcast(b, -g * a.data / (b.data * b.data), fresh=True)

    return record_op(data, (a, b), vjp)


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        _accum_new(a, g @ b.data.T)
        _accum_new(b, a.data.T @ g)

    return record_op(data, (a, b), vjp)


def bmm(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Batched matmul over the leading axis: [B,m,k] @ [B,k,n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError(f"bmm needs rank-3 operands, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        _accum_new(a, g @ b.data.transpose(0, 2, 1))
        _accum_new(b, a.data.transpose(0, 2, 1) @ g)

    return record_op(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------


def reshape(x: DiffTensor, shape) -> DiffTensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)
    if data.ndim > MAX_RANK:
        raise ValueError(f"reshape to rank {data.ndim} > {MAX_RANK}")
    orig = x.shape

    def vjp(g):
        _accum(x, g.reshape(orig))

    return record_op(data, (x,), vjp)


def permute(x: DiffTensor, axes: tuple) -> DiffTensor:
    x = as_tensor(x)
    if len(axes) != x.ndim:
        raise ValueError(f"permute: axes {axes} do not match rank {x.ndim}")
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def vjp(g):
        _accum(x, g.transpose(inv))

    return record_op(data, (x,), vjp)


def concat_rows(parts: Sequence[DiffTensor]) -> DiffTensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def vjp(g):
        for p, gp in zip(parts, np.split(g, splits, axis=0)):
            _accum(p, gp)

    return record_op(data, tuple(parts), vjp)


def slice_rows(x: DiffTensor, start: int, stop: int) -> DiffTensor:
    x = as_tensor(x)
    data = x.data[start:stop].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _accum_new(x, full)

    return record_op(data, (x,), vjp)


def segment_select(x: DiffTensor, idx) -> DiffTensor:
    """Gather rows of ``x`` at ``idx`` (duplicates allowed).

    Backward scatter-adds into the source rows, so the same row selected
    twice receives the sum of both output gradients.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("segment_select: index list must be 1-D")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"segment_select: index out of range for {n} rows")
    data = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum_new(x, full)

    return record_op(data, (x,), vjp)


def shift_rows(x: DiffTensor, k: int) -> DiffTensor:
    """Shift rows toward larger indices by ``k``, zero-filling the head."""
    x = as_tensor(x)
    if k < 0:
        raise ValueError("shift_rows: k must be >= 0")
    data = np.zeros_like(x.data)
    if k == 0:
        data[:] = x.data
    elif k < x.shape[0]:
        data[k:] = x.data[:-k]

    def vjp(g):
        full = np.zeros_like(x.data)
        if k == 0:
            full[:] = g
        elif k < x.shape[0]:
            full[:-k] = g[k:]
        _accum_new(x, full)

    return record_op(data, (x,), vjp)


def stop_gradient(x: DiffTensor) -> DiffTensor:
    """Forward identity; contributes zero gradient to everything upstream."""
    x = as_tensor(x)
    return DiffTensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def sigmoid(x: DiffTensor) -> DiffTensor:
    x = as_tensor(x)
    data = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        _accum_new(x, g * (data * (1.0 - data)))

    return record_op(data, (x,), vjp)


def silu(x: DiffTensor) -> DiffTensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * s

    def vjp(g):
        _accum_new(x, g * (s * (1.0 + x.data * (1.0 - s))))

    return record_op(data, (x,), vjp)


def exp(x: DiffTensor) -> DiffTensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def vjp(g):
        _accum_new(x, g * data)

    return record_op(data, (x,), vjp)


def log(x: DiffTensor) -> DiffTensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def vjp(g):
        _accum_new(x, g / x.data)

    return record_op(data, (x,), vjp)


def sqrt(x: DiffTensor) -> DiffTensor:
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def vjp(g):
        _accum_new(x, g * (0.5 / data))

    return record_op(data, (x,), vjp)


def rsqrt(x: DiffTensor) -> DiffTensor:
    x = as_tensor(x)
    data = 1.0 / np.sqrt(x.data)

    def vjp(g):
        _accum_new(x, g * (-0.5 * data * data * data))

    return record_op(data, (x,), vjp)


def clip01(x: DiffTensor) -> DiffTensor:
    """Clamp to [0, 1]; gradient passes only through the interior."""
    x = as_tensor(x)
    data = np.clip(x.data, 0.0, 1.0)
    interior = ((x.data > 0.0) & (x.data < 1.0)).astype(DTYPE)

    def vjp(g):
        _accum_new(x, g * interior)

    return record_op(data, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and row-wise ops
# ---------------------------------------------------------------------------


def sum_(x: DiffTensor, axis: Optional[int] = None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)

    def vjp(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).astype(DTYPE))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.shape).astype(DTYPE))

    return record_op(data, (x,), vjp)


def mean(x: DiffTensor) -> DiffTensor:
    x = as_tensor(x)
    return mul(sum_(x), 1.0 / x.size)


def cumsum(x: DiffTensor, axis: int = -1) -> DiffTensor:
    x = as_tensor(x)
    data = np.cumsum(x.data, axis=axis, dtype=DTYPE)

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis, dtype=DTYPE), axis=axis)
        _accum_new(x, rev)

    return record_op(data, (x,), vjp)


def softmax_last(x: DiffTensor) -> DiffTensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum_new(x, data * (g - inner))

    return record_op(data, (x,), vjp)


def cross_entropy_with_logits(logits: DiffTensor, targets) -> DiffTensor:
    """Mean next-token cross-entropy in nats over L positions.

    ``logits`` is [L x V], ``targets`` integer class ids of length L.
    Fused forward/backward (softmax minus one-hot) for speed and
    float32 stability.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ValueError(
            f"cross_entropy: logits {logits.shape} vs targets {t.shape} mismatch"
        )
    n, v = logits.shape
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ValueError("cross_entropy: target id out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(denom)
    nll = -logp[np.arange(n), t]
    data = np.asarray(nll.mean(dtype=DTYPE), dtype=DTYPE)

    def vjp(g):
        soft = e / denom
        soft[np.arange(n), t] -= 1.0
        gs = float(np.asarray(g).reshape(-1)[0])
        _accum_new(logits, (gs / n) * soft)

    return record_op(data, (logits,), vjp)


def cosine_similarity_rows(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Row-wise cosine similarity of two [L x D] tensors -> [L].

    Each norm is guarded by ``COSINE_EPS`` so zero rows give a finite
    (near-zero) similarity instead of NaN.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"cosine_similarity_rows: bad shapes {a.shape}, {b.shape}")
    dots = sum_(mul(a, b), axis=-1)
    na = add(sqrt(sum_(mul(a, a), axis=-1)), COSINE_EPS)
    nb = add(sqrt(sum_(mul(b, b), axis=-1)), COSINE_EPS)
    return div(dots, mul(na, nb))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class FDReport:
    """Result of one finite-difference gradient check."""

    ok: bool
    max_rel_err: float
    n_checked: int
    worst_coord: Optional[tuple] = None
    message: str = ""
    failures: list = field(default_factory=list)


def finite_difference_check(
    f: Callable[[DiffTensor], DiffTensor],
    x: DiffTensor,
    eps: float = 1e-3,
    tol: float = 1e-3,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    denom_floor: float = 1.0,
) -> FDReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be deterministic and return a scalar DiffTensor. The
    perturbation writes through ``x.data`` in place (and restores it), so
    ``x`` may be a live model parameter captured by ``f``'s closure.

    The per-coordinate error is |analytic - numeric| divided by
    max(|analytic|, |numeric|, denom_floor); the floor guards
    vanishing denominators, which float32 central differences cannot
    resolve to a pure relative tolerance. Callers should arrange f to
    have O(1) gradient entries.
    """
    x = as_tensor(x)
    was_rg = x.requires_grad
    x.requires_grad = True
    old_grad = x.grad
    x.grad = None
    tape = Tape()
    with tape:
        out = f(x)
    if out.size != 1:
        x.requires_grad = was_rg
        x.grad = old_grad
        raise ValueError("finite_difference_check: f must return a scalar")
    tape.backward(out)
    analytic = x.grad_or_zeros().copy().reshape(-1)
    x.requires_grad = was_rg
    x.grad = old_grad

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(flat.size, size=max_coords, replace=False)

    max_err = 0.0
    worst = None
    failures = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return FDReport(
                ok=False,
                max_rel_err=float("inf"),
                n_checked=len(coords),
                worst_coord=np.unravel_index(i, x.shape),
                message="non-finite value from f during perturbation",
            )
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        if not np.isfinite(a):
            return FDReport(
                ok=False,
                max_rel_err=float("inf"),
                n_checked=len(coords),
                worst_coord=np.unravel_index(i, x.shape),
                message="non-finite analytic gradient",
            )
        err = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
        if err > max_err:
            max_err = err
            worst = np.unravel_index(i, x.shape)
        if err > tol:
            failures.append((np.unravel_index(i, x.shape), float(a), float(numeric)))
    ok = max_err <= tol
    msg = "" if ok else f"{len(failures)} coordinate(s) above tol {tol}"
    return FDReport(
        ok=ok,
        max_rel_err=float(max_err),
        n_checked=len(coords),
        worst_coord=worst,
        message=msg,
        failures=failures,
    )
