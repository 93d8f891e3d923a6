"""Deterministic dense float32 kernels.

All operations round every intermediate to float32 and accumulate sums in a
fixed ascending-index order, so results are bitwise reproducible across runs
and across worker counts. Parallelism, when enabled, only splits independent
output rows; the per-row accumulation order never changes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

# Above this many f32 multiply-adds a matmul call is split across rows.
_PARALLEL_THRESHOLD = 1 << 20

_num_threads = 1


class DimensionError(ValueError):
    """Shapes do not satisfy an operation's preconditions."""


def set_num_threads(n: int) -> None:
    """Cap internal row-parallelism. Output bits are identical for any n >= 1."""
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _num_threads = n


def get_num_threads() -> int:
    return _num_threads


@dataclass(eq=False)
class Tensor:
    """Dense rank-1 or rank-2 float32 array with explicit shape.

    ``data`` is a flat row-major float32 array of length prod(dims). Tensors
    are treated as immutable after construction and are safe to share across
    threads.
    """

    dims: tuple[int, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.dims) not in (1, 2):
            raise DimensionError(f"rank must be 1 or 2, got dims={self.dims}")
        if any(d < 0 for d in self.dims):
            raise DimensionError(f"negative dimension in {self.dims}")
        n = 1
        for d in self.dims:
            n *= d
        if self.data.dtype != np.float32:
            raise DimensionError(f"data must be float32, got {self.data.dtype}")
        if self.data.ndim != 1 or self.data.size != n:
            raise DimensionError(
                f"data length {self.data.size} != product of dims {self.dims}"
            )

    @property
    def rank(self) -> int:
        return len(self.dims)

    def as_array(self) -> np.ndarray:
        """Zero-copy view shaped to ``dims``."""
        return self.data.reshape(self.dims)

    def tolist(self) -> list:
        return self.as_array().tolist()

    def equal_bits(self, other: "Tensor") -> bool:
        return self.dims == other.dims and np.array_equal(self.data, other.data)


def tensor(values, dims: tuple[int, ...] | None = None) -> Tensor:
    """Build a Tensor from nested lists or an ndarray, validating finiteness."""
    arr = np.asarray(values, dtype=np.float32)
    if dims is None:
        dims = arr.shape
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return Tensor(tuple(dims), np.ascontiguousarray(arr).reshape(-1))


def zeros(*dims: int) -> Tensor:
    n = 1
    for d in dims:
        n *= d
    return Tensor(tuple(dims), np.zeros(n, dtype=np.float32))


def identity(n: int) -> Tensor:
    return tensor(np.eye(n, dtype=np.float32))


# ---------------------------------------------------------------------------
# float32 kernels on raw ndarrays. The Tensor API below wraps these; model
# internals call them directly. Both paths share the same bit behavior.
# ---------------------------------------------------------------------------


# np.add.accumulate runs a scalar inner loop, so the 3-D form only wins on
# small working sets where the loop's per-step call overhead dominates.
_ACCUMULATE_ELEMS = 1 << 14


def _mm_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Strict ascending-t accumulation. np.add.accumulate over float32 is a
    # sequential left-to-right scan, so every branch rounds each partial sum
    # exactly like the scalar loop acc = f32(acc + f32(a[i,t]*b[t,j])).
    m, k = a.shape
    n = b.shape[1]
    if k == 0:
        return np.zeros((m, n), dtype=np.float32)
    if k == 1:
        # a single term per output element: no summation, just the product
        return a * b
    if n == 1:
        prod = a * b[:, 0]
        return np.add.accumulate(prod, axis=1, dtype=np.float32)[:, -1:]
    if m == 1:
        prod = a[0][:, None] * b
        return np.add.accumulate(prod, axis=0, dtype=np.float32)[-1:, :]
    if m * k * n <= _ACCUMULATE_ELEMS:
        prod = a[:, :, None] * b[None, :, :]
        return np.add.accumulate(prod, axis=1, dtype=np.float32)[:, -1, :]
    out = np.zeros((m, n), dtype=np.float32)
    for t in range(k):
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


def matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D float32 product with fixed ascending inner-index accumulation."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shapes do not chain: {a.shape} x {b.shape}"
        )
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    m, k = a.shape
    n = b.shape[1]
    if _num_threads > 1 and m >= 2 * _num_threads and m * k * n >= _PARALLEL_THRESHOLD:
        chunk = (m + _num_threads - 1) // _num_threads
        spans = [(i, min(i + chunk, m)) for i in range(0, m, chunk)]
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            parts = list(pool.map(lambda s: _mm_rows(a[s[0] : s[1]], b), spans))
        return np.concatenate(parts, axis=0)
    return _mm_rows(a, b)


def softmax_f32(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over a 1-D float32 vector."""
    if v.size == 0:
        raise DimensionError("softmax of empty vector")
    shifted = v - np.max(v)
    e = np.exp(shifted, dtype=np.float32)
    return e / np.add.accumulate(e, dtype=np.float32)[-1]


def rmsnorm_f32(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise RMS normalization with per-channel gain w. x is 1-D or 2-D."""
    sq = x * x
    ms = np.mean(sq, axis=-1, keepdims=True, dtype=np.float32) + np.float32(eps)
    # eps = 0 with an all-zero row would divide 0/0; zero rows normalize to zero.
    inv = np.where(ms > 0, np.float32(1.0) / np.sqrt(np.maximum(ms, np.float32(1e-45))), np.float32(0.0))
    return (x * inv.astype(np.float32) * w).astype(np.float32, copy=False)


def silu_f32(x: np.ndarray) -> np.ndarray:
    # Piecewise sigmoid avoids exp overflow for large negative inputs.
    pos = x >= 0
    z = np.where(pos, -x, x)
    ez = np.exp(z, dtype=np.float32)
    sig = np.where(pos, np.float32(1.0) / (np.float32(1.0) + ez), ez / (np.float32(1.0) + ez))
    return (x * sig).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# Public Tensor operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[i][j] = sum_t a[i][t] * b[t][j], accumulated in float32 ascending t."""
    if a.rank != 2 or b.rank != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.dims} x {b.dims}")
    if a.dims[1] != b.dims[0]:
        raise DimensionError(f"matmul inner dims differ: {a.dims} x {b.dims}")
    out = matmul_f32(a.as_array(), b.as_array())
    return Tensor((a.dims[0], b.dims[1]), out.reshape(-1))


def softmax(v: Tensor) -> Tensor:
    if v.rank != 1 or v.dims[0] == 0:
        raise DimensionError(f"softmax needs a nonempty vector, got {v.dims}")
    return Tensor(v.dims, softmax_f32(v.data))


def rmsnorm(x: Tensor, w: Tensor, eps: float) -> Tensor:
    if x.dims != w.dims or x.rank != 1:
        raise DimensionError(f"rmsnorm shape mismatch: {x.dims} vs {w.dims}")
    if eps < 0:
        raise ValueError(f"rmsnorm eps must be >= 0, got {eps}")
    return Tensor(x.dims, rmsnorm_f32(x.data, w.data, eps))


def silu(x: Tensor) -> Tensor:
    return Tensor(x.dims, silu_f32(x.data))
