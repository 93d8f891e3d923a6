"""Low-rank adaptation over frozen base weights.

An adapter holds, per target projection, factors A (r x in) and B (out x r);
merging adds the delta (alpha/r) * B @ A to the base matrix. Training uses
central-difference gradient descent on the adapter parameters only, which
keeps the package free of an autograd engine. The cost is two forward
sweeps per parameter per step, so adapters are capped at 2048 parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tokenizer as tok
from .model import (
    ModelConfig,
    ModelWeights,
    PROJECTION_FIELDS,
    forward_full,
    KVCache,
)
from .quant import QTensor
from .tensor import Tensor, matmul_f32


class AdapterError(ValueError):
    """Adapter shapes or targets do not match the model."""


@dataclass(eq=False)
class LoraAdapter:
    rank: int
    alpha: float
    # target name (e.g. "layers.0.attn.wq") -> (A, B)
    weights: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise AdapterError(f"rank must be >= 1, got {self.rank}")
        for target, (a, b) in self.weights.items():
            if a.rank != 2 or b.rank != 2:
                raise AdapterError(f"{target}: A and B must be rank-2")
            if a.dims[0] != self.rank or b.dims[1] != self.rank:
                raise AdapterError(
                    f"{target}: expected A {self.rank}x*, B *x{self.rank}; "
                    f"got A {a.dims}, B {b.dims}"
                )
            if self.rank > min(a.dims[1], b.dims[0]):
                raise AdapterError(f"{target}: rank {self.rank} exceeds min dim")

    @property
    def targets(self) -> list[str]:
        return list(self.weights.keys())

    @property
    def param_count(self) -> int:
        return sum(a.data.size + b.data.size for a, b in self.weights.values())

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            self.rank,
            self.alpha,
            {
                t: (Tensor(a.dims, a.data.copy()), Tensor(b.dims, b.data.copy()))
                for t, (a, b) in self.weights.items()
            },
        )


def default_targets(config: ModelConfig) -> list[str]:
    """The minimal common recipe: adapt wq and wv of every layer."""
    out = []
    for i in range(config.n_layers):
        out += [f"layers.{i}.attn.wq", f"layers.{i}.attn.wv"]
    return out


def _target_dims(config: ModelConfig, target: str) -> tuple[int, int]:
    leaf = target.rsplit(".", 1)[-1]
    d, f = config.d_model, config.d_ff
    dims = {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w_gate": (f, d), "w_up": (f, d), "w_down": (d, f),
    }.get(leaf)
    if dims is None or not target.startswith("layers."):
        raise AdapterError(f"unknown adapter target {target!r}")
    return dims


def init_adapter(
    config: ModelConfig,
    rank: int,
    alpha: float,
    targets: list[str] | None = None,
    seed: int = 0,
) -> LoraAdapter:
    """A ~ N(0, 1/rank) seeded, B = 0, so the initial delta is exactly zero."""
    rng = np.random.Generator(np.random.PCG64(seed))
    weights: dict[str, tuple[Tensor, Tensor]] = {}
    for target in targets if targets is not None else default_targets(config):
        out_dim, in_dim = _target_dims(config, target)
        a = rng.normal(0.0, 1.0 / rank, size=(rank, in_dim)).astype(np.float32)
        b = np.zeros((out_dim, rank), dtype=np.float32)
        weights[target] = (
            Tensor((rank, in_dim), a.reshape(-1)),
            Tensor((out_dim, rank), b.reshape(-1)),
        )
    return LoraAdapter(rank, alpha, weights)


def lora_merge(weights: ModelWeights, adapter: LoraAdapter) -> ModelWeights:
    """W' = W + (alpha/r) * B @ A on each target; everything else is shared
    unchanged. Base projections must be f32 (dequantize first if Q4)."""
    deltas: dict[str, np.ndarray] = {}
    for target, (a, b) in adapter.weights.items():
        scale = np.float32(adapter.alpha / adapter.rank)
        deltas[target] = matmul_f32(b.as_array(), a.as_array()) * scale

    by_name = dict(weights.named_tensors())
    for target, delta in deltas.items():
        base = by_name.get(target)
        if base is None:
            raise AdapterError(f"adapter target {target!r} not present in model")
        if isinstance(base, QTensor):
            raise AdapterError(
                f"{target}: cannot merge into quantized weights; dequantize first"
            )
        if base.dims != delta.shape:
            raise AdapterError(
                f"{target}: delta shape {delta.shape} != weight shape {base.dims}"
            )

    new_layers = []
    for i, layer in enumerate(weights.layers):
        updates = {}
        for name in PROJECTION_FIELDS:
            key = _layer_tensor_name(i, name)
            if key in deltas:
                base = getattr(layer, name)
                merged = (base.as_array() + deltas[key]).astype(np.float32)
                updates[name] = Tensor(base.dims, merged.reshape(-1))
        new_layers.append(replace(layer, **updates) if updates else layer)
    return ModelWeights(weights.tok_embed, new_layers, weights.final_norm)


def _layer_tensor_name(i: int, field_name: str) -> str:
    group = "attn" if field_name in ("wq", "wk", "wv", "wo") else "ffn"
    return f"layers.{i}.{group}.{field_name}"


# ---------------------------------------------------------------------------
# Desk-scale tuner: central-difference gradient descent on adapter params
# ---------------------------------------------------------------------------


def _tokenize_pairs(pairs, merges: tok.MergeTable) -> list[tuple[list[int], list[int]]]:
    out = []
    for pair in pairs:
        prompt_ids = [tok.BOS_ID] + tok.encode(pair.prompt, merges)
        response_ids = tok.encode(pair.response, merges)
        if response_ids:
            out.append((prompt_ids, response_ids))
    return out


def _loss_tokenized(
    weights: ModelWeights,
    config: ModelConfig,
    adapter: LoraAdapter,
    token_pairs: list[tuple[list[int], list[int]]],
) -> float:
    merged = lora_merge(weights, adapter)
    total = 0.0
    count = 0
    for prompt_ids, response_ids in token_pairs:
        logits = forward_full(merged, config, prompt_ids + response_ids, KVCache(config))
        # logits row t predicts ids[t+1]; responses start at len(prompt_ids)
        start = len(prompt_ids) - 1
        rows = logits[start : start + len(response_ids)].astype(np.float64)
        rows -= rows.max(axis=1, keepdims=True)
        lse = np.log(np.exp(rows).sum(axis=1))
        picked = rows[np.arange(len(response_ids)), response_ids]
        total += float((lse - picked).sum())
        count += len(response_ids)
    if count == 0:
        raise ValueError("no scorable response tokens in the dataset")
    return total / count


def corpus_loss(
    weights: ModelWeights,
    config: ModelConfig,
    adapter: LoraAdapter,
    pairs,
    merges: tok.MergeTable,
) -> float:
    """Mean next-token cross-entropy over response tokens, prompts conditioned
    on but not scored. ``pairs`` is any sequence with .prompt/.response."""
    return _loss_tokenized(weights, config, adapter, _tokenize_pairs(pairs, merges))


def _get_params(adapter: LoraAdapter) -> np.ndarray:
    parts = []
    for target in adapter.targets:
        a, b = adapter.weights[target]
        parts.append(a.data)
        parts.append(b.data)
    return np.concatenate(parts)


def _set_params(adapter: LoraAdapter, theta: np.ndarray) -> None:
    pos = 0
    for target in adapter.targets:
        a, b = adapter.weights[target]
        a.data[:] = theta[pos : pos + a.data.size]
        pos += a.data.size
        b.data[:] = theta[pos : pos + b.data.size]
        pos += b.data.size


def fd_gradient(
    weights: ModelWeights,
    config: ModelConfig,
    adapter: LoraAdapter,
    pairs,
    merges: tok.MergeTable,
    fd_eps: float,
) -> np.ndarray:
    """Central differences of corpus_loss w.r.t. every adapter parameter."""
    return _fd_gradient_tokenized(
        weights, config, adapter, _tokenize_pairs(pairs, merges), fd_eps
    )


def _fd_gradient_tokenized(
    weights: ModelWeights,
    config: ModelConfig,
    adapter: LoraAdapter,
    token_pairs: list[tuple[list[int], list[int]]],
    fd_eps: float,
) -> np.ndarray:
    work = adapter.copy()
    theta = _get_params(work).astype(np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        saved = theta[i]
        theta[i] = saved + fd_eps
        _set_params(work, theta.astype(np.float32))
        up = _loss_tokenized(weights, config, work, token_pairs)
        theta[i] = saved - fd_eps
        _set_params(work, theta.astype(np.float32))
        down = _loss_tokenized(weights, config, work, token_pairs)
        theta[i] = saved
        grad[i] = (up - down) / (2.0 * fd_eps)
    return grad


def lora_finetune_fd(
    weights: ModelWeights,
    config: ModelConfig,
    adapter_init: LoraAdapter,
    pairs,
    merges: tok.MergeTable,
    steps: int,
    lr: float,
    fd_eps: float = 1e-3,
) -> tuple[LoraAdapter, list[float]]:
    """Tune the adapter by central-difference gradient descent.

    Base weights are never touched. Returns the tuned adapter and the loss
    trace, one entry per step (the loss before that step's update) plus a
    final entry for the end state. Aborts at the last finite state if the
    loss goes non-finite.
    """
    if not pairs:
        raise ValueError("training set is empty")
    if adapter_init.param_count > 2048:
        raise ValueError(
            f"adapter has {adapter_init.param_count} parameters; "
            "central differences are capped at 2048"
        )
    for pair in pairs:
        n = 1 + len(tok.encode(pair.prompt, merges)) + len(tok.encode(pair.response, merges))
        if n > config.max_seq:
            raise ValueError(f"pair {getattr(pair, 'id', '?')} needs {n} tokens > max_seq")

    token_pairs = _tokenize_pairs(pairs, merges)
    adapter = adapter_init.copy()
    trace = [_loss_tokenized(weights, config, adapter, token_pairs)]
    if lr == 0:
        return adapter, trace * (steps + 1) if steps > 0 else trace
    for _ in range(steps):
        grad = _fd_gradient_tokenized(weights, config, adapter, token_pairs, fd_eps)
        theta = _get_params(adapter).astype(np.float64) - lr * grad
        candidate = adapter.copy()
        _set_params(candidate, theta.astype(np.float32))
        loss = _loss_tokenized(weights, config, candidate, token_pairs)
        if not np.isfinite(loss):
            break
        adapter = candidate
        trace.append(loss)
    return adapter, trace
