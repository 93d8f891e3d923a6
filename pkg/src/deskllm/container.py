"""GFAC container v1: model/adapter serialization, bit-exact and little-endian.

File layout:
  magic "GFAC" | version u32=1 | section tag u32 (1=model, 2=adapter)
  model:   config block (vocab_size, d_model, n_layers, n_heads, d_ff,
           max_seq as u32; rope_base, rmsnorm_eps as f32), then the tokenizer
           block (n_merges u32, then left/right/new_id u32 per merge)
  adapter: r u32, alpha f32
  tensor directory: n_tensors u32; per entry name_len u32, UTF-8 name,
           dtype u8 (0=f32, 1=q4), n_dims u8, dims u32 each, data_offset u64
           measured from the data-section start
  data section at the next 32-byte file boundary; each tensor's payload is
           padded to a 32-byte multiple.
"""

from __future__ import annotations

import struct

import numpy as np

from .lora import AdapterError, LoraAdapter
from .model import ModelConfig, ModelWeights, LayerWeights, expected_tensor_names
from .quant import BLOCK_SIZE, BLOCK_BYTES, QTensor
from .tensor import Tensor
from .tokenizer import MergeTable

MAGIC = b"GFAC"
VERSION = 1
SECTION_MODEL = 1
SECTION_ADAPTER = 2
DTYPE_F32 = 0
DTYPE_Q4 = 1
_ALIGN = 32


class ContainerError(ValueError):
    """Base for container parse failures; carries the failing byte offset."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateTensorError(ContainerError):
    pass


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]


def _pad_to(buf: bytearray, align: int) -> None:
    buf.extend(b"\x00" * (-len(buf) % align))


def _tensor_payload(t: Tensor | QTensor) -> tuple[int, tuple[int, ...], bytes]:
    if isinstance(t, QTensor):
        return DTYPE_Q4, t.dims, t.to_bytes()
    return DTYPE_F32, t.dims, t.data.astype("<f4").tobytes()


def _write_tensors(buf: bytearray, entries: list[tuple[str, Tensor | QTensor]]) -> None:
    payloads = []
    offsets = []
    cursor = 0
    for _, t in entries:
        dtype, dims, raw = _tensor_payload(t)
        payloads.append((dtype, dims, raw))
        offsets.append(cursor)
        cursor += len(raw) + (-len(raw) % _ALIGN)

    buf += struct.pack("<I", len(entries))
    for (name, _), (dtype, dims, _), off in zip(entries, payloads, offsets):
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<BB", dtype, len(dims))
        for d in dims:
            buf += struct.pack("<I", d)
        buf += struct.pack("<Q", off)

    _pad_to(buf, _ALIGN)
    for _, _, raw in payloads:
        buf += raw
        _pad_to(buf, _ALIGN)


def save_container(
    config: ModelConfig,
    weights: ModelWeights,
    merges: MergeTable,
    path,
) -> None:
    _check_storage_uniform(weights)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, SECTION_MODEL)
    buf += struct.pack(
        "<IIIIII",
        config.vocab_size, config.d_model, config.n_layers,
        config.n_heads, config.d_ff, config.max_seq,
    )
    buf += struct.pack("<ff", config.rope_base, config.rmsnorm_eps)
    buf += struct.pack("<I", len(merges.merges))
    for i, (left, right) in enumerate(merges.merges):
        buf += struct.pack("<III", left, right, 259 + i)
    _write_tensors(buf, list(weights.named_tensors()))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def _check_storage_uniform(weights: ModelWeights) -> None:
    kinds = {
        isinstance(t, QTensor)
        for name, t in weights.named_tensors()
        if name.endswith((".wq", ".wk", ".wv", ".wo", ".w_gate", ".w_up", ".w_down"))
    }
    if len(kinds) > 1:
        raise ValueError("projections must be uniformly f32 or q4 within one file")


def _read_directory(r: _Reader) -> list[tuple[str, int, tuple[int, ...], int, int]]:
    n_tensors = r.u32("tensor count")
    seen: set[str] = set()
    entries = []
    for _ in range(n_tensors):
        entry_offset = r.pos
        name_len = r.u32("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        if name in seen:
            raise DuplicateTensorError(f"duplicate tensor name {name!r}", entry_offset)
        seen.add(name)
        dtype = r.u8("tensor dtype")
        if dtype not in (DTYPE_F32, DTYPE_Q4):
            raise ContainerError(f"unknown dtype {dtype} for {name!r}", r.pos - 1)
        n_dims = r.u8("tensor rank")
        if n_dims not in (1, 2):
            raise ContainerError(f"tensor {name!r} has rank {n_dims}", r.pos - 1)
        dims = tuple(r.u32("tensor dim") for _ in range(n_dims))
        data_offset = r.u64("tensor data offset")
        entries.append((name, dtype, dims, data_offset, entry_offset))
    return entries


def _payload_len(dtype: int, dims: tuple[int, ...]) -> int:
    n = 1
    for d in dims:
        n *= d
    if dtype == DTYPE_F32:
        return 4 * n
    return (n // BLOCK_SIZE) * BLOCK_BYTES


def _read_tensor(
    data: bytes, data_start: int, name: str, dtype: int,
    dims: tuple[int, ...], offset: int, entry_offset: int,
) -> Tensor | QTensor:
    start = data_start + offset
    length = _payload_len(dtype, dims)
    if start + length > len(data):
        raise TruncatedError(f"data for tensor {name!r} out of bounds", start)
    raw = data[start : start + length]
    if dtype == DTYPE_Q4:
        if len(dims) != 2 or dims[1] % BLOCK_SIZE != 0:
            raise ContainerError(f"q4 tensor {name!r} has bad dims {dims}", entry_offset)
        return QTensor.from_bytes(dims, raw)
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return Tensor(dims, arr)


def load_container(path) -> tuple[ModelConfig, ModelWeights, MergeTable]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise MagicError("bad magic, not a GFAC container", 0)
    version = r.u32("version")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}", 4)
    section = r.u32("section tag")
    if section != SECTION_MODEL:
        raise ContainerError(f"expected a model container, got section tag {section}", 8)

    fields = [r.u32(n) for n in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq")]
    rope_base = r.f32("rope_base")
    rmsnorm_eps = r.f32("rmsnorm_eps")
    config = ModelConfig(*fields, rope_base=rope_base, rmsnorm_eps=rmsnorm_eps)

    n_merges = r.u32("merge count")
    merges = []
    for i in range(n_merges):
        left = r.u32("merge left")
        right = r.u32("merge right")
        new_id = r.u32("merge new id")
        if new_id != 259 + i:
            raise ContainerError(f"merge {i} has new_id {new_id}, expected {259 + i}", r.pos - 4)
        merges.append((left, right))
    table = MergeTable(merges)

    entries = _read_directory(r)
    data_start = r.pos + (-r.pos % _ALIGN)
    tensors: dict[str, Tensor | QTensor] = {}
    for name, dtype, dims, offset, entry_offset in entries:
        tensors[name] = _read_tensor(data, data_start, name, dtype, dims, offset, entry_offset)

    expected = expected_tensor_names(config)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise ContainerError(f"model tensors missing: {missing[:3]}", len(data))
    layers = []
    for i in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_norm=_expect_f32(tensors, f"layers.{i}.attn_norm"),
                ffn_norm=_expect_f32(tensors, f"layers.{i}.ffn_norm"),
                wq=tensors[f"layers.{i}.attn.wq"],
                wk=tensors[f"layers.{i}.attn.wk"],
                wv=tensors[f"layers.{i}.attn.wv"],
                wo=tensors[f"layers.{i}.attn.wo"],
                w_gate=tensors[f"layers.{i}.ffn.w_gate"],
                w_up=tensors[f"layers.{i}.ffn.w_up"],
                w_down=tensors[f"layers.{i}.ffn.w_down"],
            )
        )
    weights = ModelWeights(
        tok_embed=_expect_f32(tensors, "tok_embed"),
        layers=layers,
        final_norm=_expect_f32(tensors, "final_norm"),
    )
    _check_storage_uniform(weights)
    return config, weights, table


def _expect_f32(tensors: dict, name: str) -> Tensor:
    t = tensors[name]
    if not isinstance(t, Tensor):
        raise ContainerError(f"tensor {name!r} must be f32", 0)
    return t


def save_adapter(adapter: LoraAdapter, path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, SECTION_ADAPTER)
    buf += struct.pack("<If", adapter.rank, adapter.alpha)
    entries: list[tuple[str, Tensor | QTensor]] = []
    for target, (a, b) in adapter.weights.items():
        entries.append((f"lora.{target}.A", a))
        entries.append((f"lora.{target}.B", b))
    _write_tensors(buf, entries)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_adapter(path) -> LoraAdapter:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise MagicError("bad magic, not a GFAC container", 0)
    version = r.u32("version")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}", 4)
    section = r.u32("section tag")
    if section != SECTION_ADAPTER:
        raise ContainerError(f"expected an adapter container, got section tag {section}", 8)
    rank = r.u32("rank")
    alpha = r.f32("alpha")

    entries = _read_directory(r)
    data_start = r.pos + (-r.pos % _ALIGN)
    tensors: dict[str, Tensor | QTensor] = {}
    for name, dtype, dims, offset, entry_offset in entries:
        tensors[name] = _read_tensor(data, data_start, name, dtype, dims, offset, entry_offset)

    pairs: dict[str, dict[str, Tensor]] = {}
    for name, t in tensors.items():
        if not name.startswith("lora.") or name[-2:] not in (".A", ".B"):
            raise ContainerError(f"unexpected adapter tensor {name!r}", 0)
        if not isinstance(t, Tensor):
            raise ContainerError(f"adapter tensor {name!r} must be f32", 0)
        target, side = name[5:-2], name[-1]
        pairs.setdefault(target, {})[side] = t
    weights = {}
    for target, sides in pairs.items():
        if "A" not in sides or "B" not in sides:
            raise AdapterError(f"adapter target {target!r} is missing A or B")
        weights[target] = (sides["A"], sides["B"])
    return LoraAdapter(rank, alpha, weights)
