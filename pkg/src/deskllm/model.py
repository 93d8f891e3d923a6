"""LLaMA-style decoder transformer: pre-norm RMSNorm, RoPE, SwiGLU, no
biases, tied output embedding. Projections may be float32 tensors or 4-bit
QTensors; norms and the embedding table always stay float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import quant
from .quant import QTensor
from .tensor import Tensor, matmul_f32, rmsnorm_f32, silu_f32

PROJECTION_FIELDS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


class ContextOverflowError(RuntimeError):
    """Sequence would exceed the model's max_seq; callers decide truncation."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq: int
    rope_base: float = 10000.0
    rmsnorm_eps: float = 1e-5

    def __post_init__(self) -> None:
        # The container stores these as f32; keep the in-memory values on the
        # same grid so save/load round-trips bitwise.
        object.__setattr__(self, "rope_base", float(np.float32(self.rope_base)))
        object.__setattr__(self, "rmsnorm_eps", float(np.float32(self.rmsnorm_eps)))
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 32 != 0 or self.d_ff % 32 != 0:
            raise ValueError("d_model and d_ff must be multiples of 32 for quantization")
        if self.vocab_size < 259:
            raise ValueError(f"vocab_size must be >= 259 (bytes + specials), got {self.vocab_size}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(eq=False)
class LayerWeights:
    attn_norm: Tensor
    ffn_norm: Tensor
    wq: Tensor | QTensor
    wk: Tensor | QTensor
    wv: Tensor | QTensor
    wo: Tensor | QTensor
    w_gate: Tensor | QTensor
    w_up: Tensor | QTensor
    w_down: Tensor | QTensor


@dataclass(eq=False)
class ModelWeights:
    tok_embed: Tensor  # (vocab, d_model); the output projection is its transpose
    layers: list[LayerWeights]
    final_norm: Tensor

    def named_tensors(self):
        """Yield (name, tensor) in canonical container order."""
        yield "tok_embed", self.tok_embed
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.attn_norm", layer.attn_norm
            yield f"layers.{i}.ffn_norm", layer.ffn_norm
            yield f"layers.{i}.attn.wq", layer.wq
            yield f"layers.{i}.attn.wk", layer.wk
            yield f"layers.{i}.attn.wv", layer.wv
            yield f"layers.{i}.attn.wo", layer.wo
            yield f"layers.{i}.ffn.w_gate", layer.w_gate
            yield f"layers.{i}.ffn.w_up", layer.w_up
            yield f"layers.{i}.ffn.w_down", layer.w_down
        yield "final_norm", self.final_norm

    @property
    def is_quantized(self) -> bool:
        return any(isinstance(getattr(l, f), QTensor) for l in self.layers for f in PROJECTION_FIELDS)

    def equal_bits(self, other: "ModelWeights") -> bool:
        mine = list(self.named_tensors())
        theirs = list(other.named_tensors())
        if len(mine) != len(theirs):
            return False
        for (name_a, a), (name_b, b) in zip(mine, theirs):
            if name_a != name_b or type(a) is not type(b) or not a.equal_bits(b):
                return False
        return True


def expected_tensor_names(config: ModelConfig) -> list[str]:
    names = ["tok_embed"]
    for i in range(config.n_layers):
        names += [
            f"layers.{i}.attn_norm", f"layers.{i}.ffn_norm",
            f"layers.{i}.attn.wq", f"layers.{i}.attn.wk",
            f"layers.{i}.attn.wv", f"layers.{i}.attn.wo",
            f"layers.{i}.ffn.w_gate", f"layers.{i}.ffn.w_up", f"layers.{i}.ffn.w_down",
        ]
    names.append("final_norm")
    return names


def new_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Random desk-scale model: projections and embeddings ~ N(0, 0.02),
    norm gains at 1 so activations keep a usable scale."""
    rng = np.random.Generator(np.random.PCG64(seed))

    def normal(*dims: int) -> Tensor:
        return Tensor(dims, rng.normal(0.0, 0.02, size=int(np.prod(dims))).astype(np.float32))

    def ones(n: int) -> Tensor:
        return Tensor((n,), np.ones(n, dtype=np.float32))

    d, f = config.d_model, config.d_ff
    layers = [
        LayerWeights(
            attn_norm=ones(d), ffn_norm=ones(d),
            wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d),
            w_gate=normal(f, d), w_up=normal(f, d), w_down=normal(d, f),
        )
        for _ in range(config.n_layers)
    ]
    return ModelWeights(
        tok_embed=normal(config.vocab_size, config.d_model),
        layers=layers,
        final_norm=ones(config.d_model),
    )


def quantize_weights(weights: ModelWeights) -> ModelWeights:
    """Quantize every 2-D projection to 4-bit blocks; norms/embeddings stay f32."""

    def q(t: Tensor | QTensor) -> QTensor:
        return t if isinstance(t, QTensor) else quant.quantize_tensor(t)

    layers = [
        replace(
            layer,
            **{name: q(getattr(layer, name)) for name in PROJECTION_FIELDS},
        )
        for layer in weights.layers
    ]
    return ModelWeights(weights.tok_embed, layers, weights.final_norm)


def dequantize_weights(weights: ModelWeights) -> ModelWeights:
    def dq(t: Tensor | QTensor) -> Tensor:
        return quant.dequantize_tensor(t) if isinstance(t, QTensor) else t

    layers = [
        replace(
            layer,
            **{name: dq(getattr(layer, name)) for name in PROJECTION_FIELDS},
        )
        for layer in weights.layers
    ]
    return ModelWeights(weights.tok_embed, layers, weights.final_norm)


class KVCache:
    """Per-layer rotated keys and values for positions 0..length-1.

    Single-owner mutable state: one generation stream per cache.
    """

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self.length = 0
        self.keys = [np.zeros((config.max_seq, config.d_model), dtype=np.float32) for _ in range(config.n_layers)]
        self.values = [np.zeros((config.max_seq, config.d_model), dtype=np.float32) for _ in range(config.n_layers)]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        t = k.shape[0]
        self.keys[layer][self.length : self.length + t] = k
        self.values[layer][self.length : self.length + t] = v

    def commit(self, t: int) -> None:
        self.length += t


def _project(w: Tensor | QTensor, x: np.ndarray) -> np.ndarray:
    """y = x · Wᵀ for activations x (T, in) and weight W (out, in)."""
    if isinstance(w, QTensor):
        if x.shape[0] == 1:
            return quant.qmatvec(w, Tensor((x.shape[1],), x.reshape(-1))).data.reshape(1, -1)
        w_mat = quant._decode_matrix(w)
    else:
        w_mat = w.as_array()
    return matmul_f32(x, w_mat.T)


def _rope_angles(config: ModelConfig, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = config.d_head // 2
    freqs = config.rope_base ** (-2.0 * np.arange(half) / config.d_head)
    angles = positions[:, None].astype(np.float64) * freqs[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, n_heads: int) -> np.ndarray:
    """Rotate (2i, 2i+1) pairs of each head by the position-dependent angles."""
    t, d = x.shape
    h = x.reshape(t, n_heads, d // n_heads)
    even = h[:, :, 0::2]
    odd = h[:, :, 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(h)
    out[:, :, 0::2] = even * c - odd * s
    out[:, :, 1::2] = even * s + odd * c
    return out.reshape(t, d)


def forward_full(
    weights: ModelWeights,
    config: ModelConfig,
    tokens: list[int],
    cache: KVCache,
) -> np.ndarray:
    """Run the decoder over ``tokens``, appending to ``cache``.

    Returns next-token logits for every input position, shape (len(tokens),
    vocab_size). Row t holds the distribution over the token following
    tokens[t] given everything up to and including it.
    """
    t_new = len(tokens)
    if t_new == 0:
        raise ValueError("forward needs at least one token")
    past = cache.length
    if past + t_new > config.max_seq:
        raise ContextOverflowError(
            f"context {past}+{t_new} exceeds max_seq {config.max_seq}"
        )
    for tok in tokens:
        if not (0 <= tok < config.vocab_size):
            raise ValueError(f"token id {tok} outside vocab of {config.vocab_size}")

    positions = np.arange(past, past + t_new)
    cos, sin = _rope_angles(config, positions)
    x = weights.tok_embed.as_array()[np.asarray(tokens, dtype=np.int64)].copy()

    hd = config.d_head
    scale = np.float32(1.0 / np.sqrt(hd))
    for li, layer in enumerate(weights.layers):
        xn = rmsnorm_f32(x, layer.attn_norm.data, config.rmsnorm_eps)
        q = _apply_rope(_project(layer.wq, xn), cos, sin, config.n_heads)
        k = _apply_rope(_project(layer.wk, xn), cos, sin, config.n_heads)
        v = _project(layer.wv, xn)
        cache.append(li, k, v)
        k_all = cache.keys[li][: past + t_new]
        v_all = cache.values[li][: past + t_new]

        attn_out = np.empty((t_new, config.d_model), dtype=np.float32)
        for h in range(config.n_heads):
            cols = slice(h * hd, (h + 1) * hd)
            scores = matmul_f32(q[:, cols], k_all[:, cols].T) * scale
            if t_new > 1:
                # causal mask inside the new block; past positions always visible
                mask = np.triu(np.ones((t_new, t_new), dtype=bool), k=1)
                scores[:, past:][mask] = -np.inf
            probs = _softmax_rows(scores)
            attn_out[:, cols] = matmul_f32(probs, v_all[:, cols])
        x = x + _project(layer.wo, attn_out)

        hn = rmsnorm_f32(x, layer.ffn_norm.data, config.rmsnorm_eps)
        gate = silu_f32(_project(layer.w_gate, hn))
        up = _project(layer.w_up, hn)
        x = x + _project(layer.w_down, (gate * up).astype(np.float32))

    cache.commit(t_new)
    final = rmsnorm_f32(x, weights.final_norm.data, config.rmsnorm_eps)
    return matmul_f32(final, weights.tok_embed.as_array().T)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = np.max(scores, axis=1, keepdims=True)
    e = np.exp(scores - m, dtype=np.float32)
    return e / np.sum(e, axis=1, keepdims=True, dtype=np.float32)


def forward(
    weights: ModelWeights,
    config: ModelConfig,
    tokens: list[int],
    cache: KVCache,
) -> Tensor:
    """Logits for the token following the last input position."""
    logits = forward_full(weights, config, tokens, cache)
    return Tensor((config.vocab_size,), np.ascontiguousarray(logits[-1]))


class Transformer:
    """Weights + config bundled behind the interfaces the harnesses consume."""

    def __init__(self, weights: ModelWeights, config: ModelConfig) -> None:
        self.weights = weights
        self.config = config

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def max_seq(self) -> int:
        return self.config.max_seq

    def new_cache(self) -> KVCache:
        return KVCache(self.config)

    def forward(self, tokens: list[int], cache: KVCache) -> Tensor:
        return forward(self.weights, self.config, tokens, cache)

    def full_logits(self, tokens: list[int]) -> np.ndarray:
        """Teacher-forced logits for all positions with a fresh cache."""
        return forward_full(self.weights, self.config, tokens, self.new_cache())
