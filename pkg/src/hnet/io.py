"""Corpus handling, checkpoints, metrics emission, boundary rendering.

Checkpoints are a single self-describing binary file: magic ``HNET``,
a u32 format version, a canonical-JSON header (config echo, step, RNG
state, tensor index), then raw little-endian float32 tensor data. The
round trip is byte-identical, which the resume tests rely on.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import HNet, ModelConfig
from .tensor import DTYPE

CHECKPOINT_MAGIC = b"HNET"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    """Raw byte streams with a deterministic contiguous train/val split."""

    train: np.ndarray
    val: np.ndarray
    seed: int

    def windows(self, seq_len: int, count: int, gen=None, split: str = "train"):
        """Sample fixed-length (seq_len + 1)-byte windows; same seed, same order."""
        data = self.train if split == "train" else self.val
        gen = gen or np.random.default_rng(self.seed)
        hi = len(data) - (seq_len + 1)
        if hi < 0:
            raise ValueError(f"{split} split too short for seq_len {seq_len}")
        starts = gen.integers(0, hi + 1, size=count)
        return [data[s : s + seq_len + 1] for s in starts]


def load_corpus(path, split_fraction: float = 0.9, seed: int = 0) -> Corpus:
    """Read a file as raw bytes (no decoding) and split contiguously."""
    data = np.fromfile(path, dtype=np.uint8)
    if data.size == 0:
        raise ValueError(f"corpus file {path} is empty")
    if not 0.0 < split_fraction <= 1.0:
        raise ValueError("split_fraction must be in (0, 1]")
    cut = int(data.size * split_fraction)
    return Corpus(train=data[:cut], val=data[cut:], seed=seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _atomic_write(path: str, blob: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(
    path: str,
    model: HNet,
    step: int = 0,
    optimizer_arrays: Optional[dict] = None,
    adam_t: Optional[int] = None,
    rng_state: Optional[dict] = None,
) -> None:
    arrays = {name: p.data for name, p in model.named_parameters()}
    if optimizer_arrays:
        arrays.update(optimizer_arrays)
    index = []
    offset = 0
    names = sorted(arrays)
    for name in names:
        a = arrays[name]
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 4
    header = {
        "config": model.config.to_dict(),
        "step": int(step),
        "adam_t": adam_t,
        "rng": rng_state,
        "has_optimizer": bool(optimizer_arrays),
        "tensors": index,
    }
    hjson = _canonical_json(header).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<Q", len(hjson)))
    parts.append(hjson)
    for name in names:
        parts.append(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))


@dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    adam_t: Optional[int]
    rng_state: Optional[dict]
    has_optimizer: bool
    arrays: dict  # name -> np.ndarray float32


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = base + ent["offset"]
        arrays[ent["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=n, offset=start)
            .reshape(shape)
            .astype(DTYPE)
        )
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        step=header["step"],
        adam_t=header.get("adam_t"),
        rng_state=header.get("rng"),
        has_optimizer=header.get("has_optimizer", False),
        arrays=arrays,
    )


def restore_model(ckpt: Checkpoint, seed: int = 0) -> HNet:
    """Build a model from the config echo and load its weights, shape-checked."""
    model = HNet(ckpt.config, seed=seed)
    for name, p in model.named_parameters():
        if name not in ckpt.arrays:
            raise ValueError(f"checkpoint missing tensor {name}")
        a = ckpt.arrays[name]
        if a.shape != p.data.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name}: {a.shape} vs {p.data.shape}"
            )
        p.data[:] = a
    return model


def rng_state_to_json(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def rng_from_json(state: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen


# ---------------------------------------------------------------------------
# metrics / plot data
# ---------------------------------------------------------------------------


class JsonlWriter:
    """Line-delimited records, flushed per write."""

    def __init__(self, path):
        self.path = str(path)
        self._f = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_plot_data(path, rows) -> None:
    """Two-column step/value data for external plotting."""
    lines = ["step\tvalue"] + [f"{int(s)}\t{v:.6f}" for s, v in rows]
    _atomic_write(str(path), ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def robustness_score(perturbed_acc: float, clean_acc: float) -> Optional[float]:
    """100 * (perturbed - 0.25) / max(clean - 0.25, 0).

    Returns None (reported as undefined) when the clean accuracy is at or
    below chance, where the denominator guard makes the score undefined.
    """
    for v in (perturbed_acc, clean_acc):
        if not 0.0 <= v <= 1.0:
            raise ValueError("accuracies must be in [0, 1]")
    denom = max(clean_acc - 0.25, 0.0)
    if denom == 0.0:
        return None
    return 100.0 * (perturbed_acc - 0.25) / denom


# ---------------------------------------------------------------------------
# boundary visualization
# ---------------------------------------------------------------------------


@dataclass
class BoundaryVisualization:
    records: list  # one dict per input position

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records)

    def render_text(self, width: int = 96) -> str:
        n_stages = len(self.records[0]["flags"]) if self.records else 0
        out = []
        for start in range(0, len(self.records), width):
            chunk = self.records[start : start + width]
            out.append("".join(r["char"] for r in chunk))
            for s in range(n_stages):
                out.append(
                    "".join("^" if r["flags"][s] else " " for r in chunk)
                    + f"  [stage {s}]"
                )
            out.append("")
        return "\n".join(out)


def _printable(byte: int) -> str:
    return chr(byte) if 0x20 <= byte < 0x7F else "·"


def visualize_boundaries(model: HNet, byte_seq) -> BoundaryVisualization:
    """Run eval-mode forward and align per-stage boundary flags under bytes.

    Inner stages mark the source position (in bytes) of each compressed
    vector that fired at the next level.
    """
    byte_seq = np.asarray(byte_seq, dtype=np.int64)
    out = model.forward(byte_seq)
    L = byte_seq.size
    n_stages = len(out.decisions)
    flags = np.zeros((n_stages, L), dtype=bool)
    probs = np.zeros((n_stages, L), dtype=np.float64)
    # map stage-s positions back to byte positions
    pos_of = np.arange(L)
    for s, dec in enumerate(out.decisions):
        flags[s, pos_of[dec.selected_idx]] = True
        probs[s, pos_of] = dec.p.data
        pos_of = pos_of[dec.selected_idx]
    records = []
    for t in range(L):
        records.append(
            {
                "pos": t,
                "byte": int(byte_seq[t]),
                "char": _printable(int(byte_seq[t])),
                "flags": flags[:, t].tolist(),
                "p": [round(float(probs[s, t]), 6) for s in range(n_stages)],
            }
        )
    return BoundaryVisualization(records=records)


def word_start_overlap(byte_seq, boundary_flags) -> dict:
    """How strongly predicted boundaries land on word starts.

    A word start is an alphanumeric byte whose predecessor is not
    alphanumeric. Returns the boundary precision against word starts, the
    word-start base rate, and their ratio.
    """
    b = np.asarray(byte_seq, dtype=np.uint8)
    flags = np.asarray(boundary_flags, dtype=bool)
    alnum = ((b >= 0x30) & (b <= 0x39)) | ((b >= 0x41) & (b <= 0x5A)) | (
        (b >= 0x61) & (b <= 0x7A)
    )
    word_start = alnum.copy()
    word_start[1:] &= ~alnum[:-1]
    n_boundary = int(flags.sum())
    hits = int((flags & word_start).sum())
    precision = hits / n_boundary if n_boundary else 0.0
    base_rate = float(word_start.mean()) if b.size else 0.0
    return {
        "boundary_word_start_precision": precision,
        "word_start_base_rate": base_rate,
        "lift": precision / base_rate if base_rate > 0 else float("inf"),
        "boundaries": n_boundary,
    }
