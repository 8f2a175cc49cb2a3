"""Binary checkpoints, batch matrices, JSON reports and the parameter-count calculator.

Checkpoint layout (little-endian throughout)::

    b"SMCK" | u16 version | u32 L | u32 d_h | u32 d_m
    per layer:  u32 n | u32 k | u32 n_storage | u32[n] remap
    per layer:  f32 router (d_h x n, row-major)
                per stored expert: f32 W_gate (d_h x d_m), W_up (d_h x d_m), W_down (d_m x d_h)

Batch files are ``b"F32M" | u32 T | u32 d_h | f32[T x d_h]``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ExpertWeights, MoeLayer, MoeModel, TokenBatch

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1
BATCH_MAGIC = b"F32M"
REPORT_SCHEMA_VERSION = 1

_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    code = "checkpoint_error"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


class SizeMismatchError(CheckpointError):
    code = "size_mismatch"


def _write_f32(buf: list, a: np.ndarray):
    buf.append(np.ascontiguousarray(a, dtype=_F32).tobytes())


def checkpoint_bytes(model: MoeModel) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<HIII", CHECKPOINT_VERSION, model.num_layers, model.d_h, model.d_m)]
    for layer in model.layers:
        parts.append(struct.pack("<III", layer.n, layer.k, layer.n_storage))
        parts.append(np.asarray(layer.remap, dtype="<u4").tobytes())
    for layer in model.layers:
        _write_f32(parts, layer.router)
        for e in layer.experts:
            _write_f32(parts, e.w_gate)
            _write_f32(parts, e.w_up)
            _write_f32(parts, e.w_down)
    return b"".join(parts)


def save_checkpoint(model: MoeModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, nbytes: int, what: str, err=TruncatedError) -> bytes:
        if nbytes > self.remaining:
            raise err(f"{what} needs {nbytes} bytes but only {self.remaining} remain")
        out = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out


def checkpoint_from_bytes(data: bytes) -> MoeModel:
    """Parse and validate a checkpoint; all sizes are checked before any tensor is built."""
    rd = _Reader(data)
    if rd.remaining < 4 or rd.take(4, "magic") != CHECKPOINT_MAGIC:
        raise BadMagicError("not an SMCK checkpoint (bad magic)")
    (version,) = struct.unpack("<H", rd.take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    L, d_h, d_m = struct.unpack("<III", rd.take(12, "header"))

    headers = []
    for li in range(L):
        n, k, n_storage = struct.unpack("<III", rd.take(12, f"layer {li} header"))
        remap_bytes = 4 * n
        if remap_bytes > rd.remaining:
            raise SizeMismatchError(
                f"layer {li} claims {n} experts; its remap table alone ({remap_bytes} bytes) "
                f"exceeds the {rd.remaining} bytes left in the file"
            )
        remap = np.frombuffer(rd.take(remap_bytes, "remap"), dtype="<u4").astype(np.int64)
        headers.append((n, k, n_storage, remap))

    expected = sum(d_h * n + n_storage * 3 * d_h * d_m for n, _, n_storage, _ in headers) * 4
    if expected > rd.remaining:
        raise TruncatedError(f"payload needs {expected} bytes, file has {rd.remaining}")
    if expected < rd.remaining:
        raise SizeMismatchError(f"payload needs {expected} bytes, file has {rd.remaining} (trailing data)")

    def mat(rows, cols):
        return np.frombuffer(rd.take(4 * rows * cols, "tensor"), dtype=_F32).reshape(rows, cols)

    layers = []
    for n, k, n_storage, remap in headers:
        router = mat(d_h, n)
        experts = tuple(
            ExpertWeights(mat(d_h, d_m), mat(d_h, d_m), mat(d_m, d_h)) for _ in range(n_storage)
        )
        try:
            layers.append(MoeLayer(router, experts, tuple(remap), k))
        except ValueError as exc:
            raise CheckpointError(f"inconsistent layer: {exc}") from exc
    return MoeModel(tuple(layers), d_h, d_m)


def load_checkpoint(path) -> MoeModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def save_batch(batch: TokenBatch, path) -> None:
    v = batch.vectors
    Path(path).write_bytes(BATCH_MAGIC + struct.pack("<II", *v.shape) + np.ascontiguousarray(v, dtype=_F32).tobytes())


def load_batch(path) -> TokenBatch:
    data = Path(path).read_bytes()
    rd = _Reader(data)
    if rd.remaining < 4 or rd.take(4, "magic") != BATCH_MAGIC:
        raise BadMagicError("not an F32M batch file (bad magic)")
    T, d_h = struct.unpack("<II", rd.take(8, "header"))
    need = 4 * T * d_h
    if need > rd.remaining:
        raise TruncatedError(f"batch payload needs {need} bytes, file has {rd.remaining}")
    if need < rd.remaining:
        raise SizeMismatchError(f"batch payload needs {need} bytes, file has {rd.remaining}")
    return TokenBatch(np.frombuffer(rd.take(need, "payload"), dtype=_F32).reshape(T, d_h))


# -- reports ---------------------------------------------------------------------


def report_doc(command: str, meta: dict, **sections) -> dict:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "command": command, "meta": meta}
    doc.update(sections)
    return doc


def dumps_report(doc: dict) -> str:
    # json emits repr() floats, which round-trip float64 exactly
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(doc: dict, out=None) -> None:
    text = dumps_report(doc)
    if out is None or str(out) == "-":
        import sys

        sys.stdout.write(text)
    else:
        tmp = f"{out}.tmp{os.getpid()}"
        Path(tmp).write_text(text)
        os.replace(tmp, out)


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


# -- parameter arithmetic ----------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    """Dimensions of a decoder-only SMoE transformer, enough to count parameters.

    Non-expert parameters cover embeddings, attention, norms, the router and
    any always-on shared expert; only routed experts shrink when merging, and
    the router keeps its original width.
    """

    name: str
    num_layers: int
    d_h: int
    d_m: int
    n_experts: int
    vocab: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    qkv_bias: bool = False
    tied_embeddings: bool = False
    shared_expert_d_m: int = 0
    shared_expert_gate: bool = False

    def expert_params(self, n_experts: int | None = None) -> int:
        n = self.n_experts if n_experts is None else n_experts
        return self.num_layers * n * 3 * self.d_h * self.d_m

    def non_expert_params(self) -> int:
        q = self.d_h * self.n_heads * self.head_dim
        kv = 2 * self.d_h * self.n_kv_heads * self.head_dim
        o = self.n_heads * self.head_dim * self.d_h
        bias = (self.n_heads + 2 * self.n_kv_heads) * self.head_dim if self.qkv_bias else 0
        per_layer = q + kv + o + bias
        per_layer += self.d_h * self.n_experts  # router
        per_layer += 2 * self.d_h  # pre-attention and pre-FFN RMSNorm
        per_layer += 3 * self.d_h * self.shared_expert_d_m
        per_layer += self.d_h if self.shared_expert_gate else 0
        embed = self.vocab * self.d_h * (1 if self.tied_embeddings else 2)
        return self.num_layers * per_layer + embed + self.d_h

    def total_params(self, n_experts: int | None = None) -> int:
        return self.non_expert_params() + self.expert_params(n_experts)


PRESETS = {
    "mixtral-8x7b": ArchSpec(
        "mixtral-8x7b", num_layers=32, d_h=4096, d_m=14336, n_experts=8,
        vocab=32000, n_heads=32, n_kv_heads=8, head_dim=128,
    ),
    "qwen1.5-moe-a2.7b": ArchSpec(
        "qwen1.5-moe-a2.7b", num_layers=24, d_h=2048, d_m=1408, n_experts=60,
        vocab=151936, n_heads=16, n_kv_heads=16, head_dim=128, qkv_bias=True,
        shared_expert_d_m=5632, shared_expert_gate=True,
    ),
}


def params_table(arch: ArchSpec, expert_counts) -> list[dict]:
    base = arch.total_params()
    rows = []
    for r in expert_counts:
        total = arch.total_params(r)
        rows.append(
            {
                "experts": int(r),
                "expert_params": arch.expert_params(r),
                "total_params": total,
                "total_billions": total / 1e9,
                "expert_ratio": arch.expert_params(r) / arch.expert_params(),
                "total_ratio": total / base,
            }
        )
    return rows
