"""4-bit block quantization codec and quantized matrix-vector kernel.

Weights are compressed in 32-element blocks. Each block stores one float32
scale d and 32 unsigned 4-bit codes with a fixed offset of 8, so code q
decodes to d * (q - 8). Choosing d = max|x| / 7 keeps every source value
inside the representable lattice with round-trip error at most d/2.

Wire layout per block (little-endian, 20 bytes): bytes 0-3 are the f32
scale, bytes 4-19 pack the 32 codes two per byte — byte j holds element 2j
in the low nibble and element 2j+1 in the high nibble.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor

BLOCK_SIZE = 32
BLOCK_BYTES = 20
_PACKED_BYTES = 16
_OFFSET = 8


class EncodingError(ValueError):
    """Input cannot be quantized (non-finite values)."""


class AlignmentError(ValueError):
    """Column count is not a multiple of the block size."""


@dataclass(eq=False)
class QBlock:
    """One quantized block: float32 scale + 32 codes in [0, 15]."""

    scale: np.float32
    codes: np.ndarray  # (32,) uint8, each in [0, 15]

    def to_bytes(self) -> bytes:
        packed = (self.codes[0::2] | (self.codes[1::2] << 4)).astype(np.uint8)
        return np.float32(self.scale).tobytes() + packed.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "QBlock":
        if len(raw) != BLOCK_BYTES:
            raise ValueError(f"block must be {BLOCK_BYTES} bytes, got {len(raw)}")
        scale = np.frombuffer(raw[:4], dtype="<f4")[0]
        packed = np.frombuffer(raw[4:], dtype=np.uint8)
        codes = np.empty(BLOCK_SIZE, dtype=np.uint8)
        codes[0::2] = packed & 0x0F
        codes[1::2] = packed >> 4
        return cls(scale, codes)


@dataclass(eq=False)
class QTensor:
    """Block-quantized 2-D weight matrix. cols must divide by 32.

    ``scales`` has one entry per block, ``packed`` one 16-byte row per block,
    blocks in row-major order (cols/32 per matrix row). Immutable after
    construction and safe to share across threads.
    """

    dims: tuple[int, int]
    scales: np.ndarray = field(repr=False)  # (n_blocks,) float32
    packed: np.ndarray = field(repr=False)  # (n_blocks, 16) uint8

    def __post_init__(self) -> None:
        rows, cols = self.dims
        if cols % BLOCK_SIZE != 0:
            raise AlignmentError(
                f"cols must be a multiple of {BLOCK_SIZE}, got {cols}; pad the input"
            )
        n_blocks = rows * cols // BLOCK_SIZE
        if self.scales.shape != (n_blocks,) or self.packed.shape != (n_blocks, _PACKED_BYTES):
            raise ValueError("block storage does not match dims")

    @property
    def n_blocks(self) -> int:
        return self.dims[0] * self.dims[1] // BLOCK_SIZE

    @property
    def payload_bytes(self) -> int:
        return self.n_blocks * BLOCK_BYTES

    def block(self, i: int) -> QBlock:
        codes = np.empty(BLOCK_SIZE, dtype=np.uint8)
        codes[0::2] = self.packed[i] & 0x0F
        codes[1::2] = self.packed[i] >> 4
        return QBlock(self.scales[i], codes)

    def to_bytes(self) -> bytes:
        out = np.empty((self.n_blocks, BLOCK_BYTES), dtype=np.uint8)
        out[:, :4] = self.scales.astype("<f4").view(np.uint8).reshape(-1, 4)
        out[:, 4:] = self.packed
        return out.tobytes()

    @classmethod
    def from_bytes(cls, dims: tuple[int, int], raw: bytes) -> "QTensor":
        rows, cols = dims
        n_blocks = rows * cols // BLOCK_SIZE
        if len(raw) != n_blocks * BLOCK_BYTES:
            raise ValueError(
                f"payload is {len(raw)} bytes, expected {n_blocks * BLOCK_BYTES}"
            )
        flat = np.frombuffer(raw, dtype=np.uint8).reshape(n_blocks, BLOCK_BYTES)
        scales = flat[:, :4].copy().view("<f4").reshape(-1).astype(np.float32)
        return cls(dims, scales, flat[:, 4:].copy())

    def equal_bits(self, other: "QTensor") -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.scales.view(np.uint32), other.scales.view(np.uint32))
            and np.array_equal(self.packed, other.packed)
        )


def _encode_blocks(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized block codec core. x: (n_blocks, 32) float32 -> scales, codes."""
    absmax = np.max(np.abs(x), axis=1)
    scales = (absmax / np.float32(7.0)).astype(np.float32)
    # Ratio in float64, round half away from zero, then clamp to the code range.
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = x.astype(np.float64) / scales[:, None].astype(np.float64)
    ratio[scales == 0] = 0.0
    q = np.where(ratio >= 0, np.floor(ratio + 0.5), np.ceil(ratio - 0.5))
    codes = np.clip(q + _OFFSET, 0, 15).astype(np.uint8)
    return scales, codes


def quantize_block(x) -> QBlock:
    """Encode 32 floats into one block. d = max|x|/7; all-zero blocks get d=0."""
    arr = np.asarray(x, dtype=np.float32).reshape(-1)
    if arr.size != BLOCK_SIZE:
        raise DimensionError(f"block must have {BLOCK_SIZE} elements, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise EncodingError("cannot quantize non-finite values")
    scales, codes = _encode_blocks(arr.reshape(1, BLOCK_SIZE))
    return QBlock(scales[0], codes[0])


def dequantize_block(b: QBlock) -> np.ndarray:
    """Decode a block back to 32 float32 values: x̂_i = d * (q_i - 8)."""
    return (b.scale * (b.codes.astype(np.float32) - np.float32(_OFFSET))).astype(np.float32)


def quantize_tensor(w: Tensor) -> QTensor:
    if w.rank != 2:
        raise DimensionError(f"only rank-2 tensors quantize, got dims={w.dims}")
    rows, cols = w.dims
    if cols % BLOCK_SIZE != 0:
        raise AlignmentError(
            f"cols must be a multiple of {BLOCK_SIZE}, got {cols}; pad the input"
        )
    if not np.all(np.isfinite(w.data)):
        raise EncodingError("cannot quantize non-finite values")
    blocks = w.data.reshape(-1, BLOCK_SIZE)
    scales, codes = _encode_blocks(blocks)
    packed = (codes[:, 0::2] | (codes[:, 1::2] << 4)).astype(np.uint8)
    return QTensor((rows, cols), scales, packed)


def _decode_matrix(q: QTensor) -> np.ndarray:
    """Decode all blocks to a (rows, cols) float32 matrix."""
    codes = np.empty((q.n_blocks, BLOCK_SIZE), dtype=np.float32)
    codes[:, 0::2] = q.packed & 0x0F
    codes[:, 1::2] = q.packed >> 4
    vals = (codes - np.float32(_OFFSET)) * q.scales[:, None]
    return vals.astype(np.float32).reshape(q.dims)


def dequantize_tensor(q: QTensor) -> Tensor:
    return Tensor(q.dims, _decode_matrix(q).reshape(-1))


def qmatvec(q: QTensor, x: Tensor) -> Tensor:
    """y = q · x over decoded blocks, bitwise equal to dequantize-then-matmul.

    Blocks are decoded in row order and products accumulated in the same
    ascending column order the dense matmul kernel uses.
    """
    if x.rank != 1 or x.dims[0] != q.dims[1]:
        raise DimensionError(f"qmatvec shape mismatch: {q.dims} x {x.dims}")
    rows, cols = q.dims
    if cols == 0:
        return Tensor((rows,), np.zeros(rows, dtype=np.float32))
    per_row = cols // BLOCK_SIZE
    scales = q.scales.reshape(rows, per_row)
    packed = q.packed.reshape(rows, per_row, _PACKED_BYTES)
    codes = np.empty((rows, per_row, BLOCK_SIZE), dtype=np.float32)
    codes[:, :, 0::2] = packed & 0x0F
    codes[:, :, 1::2] = packed >> 4
    w = ((codes - np.float32(_OFFSET)) * scales[:, :, None]).reshape(rows, cols)
    prod = w * x.data
    out = np.add.accumulate(prod, axis=1, dtype=np.float32)[:, -1]
    return Tensor((rows,), np.ascontiguousarray(out))
