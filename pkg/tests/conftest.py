import numpy as np
import pytest

from deskllm.model import ModelConfig, new_random
from deskllm.tokenizer import MergeTable


@pytest.fixture
def micro_config():
    return ModelConfig(
        vocab_size=300, d_model=32, n_layers=2, n_heads=2, d_ff=64, max_seq=128
    )


@pytest.fixture
def micro_model(micro_config):
    return new_random(micro_config, seed=1234), micro_config


@pytest.fixture
def empty_merges():
    return MergeTable()


def reference_forward(weights, config, tokens):
    """Independent float64 decoder oracle, written against the architecture
    definition rather than the production kernels."""

    def mat(t):
        return np.asarray(t.as_array(), dtype=np.float64)

    def norm(x, w, eps):
        ms = np.mean(x * x, axis=-1, keepdims=True)
        return x / np.sqrt(ms + eps) * w

    def rope(x, n_heads, base):
        t, d = x.shape
        hd = d // n_heads
        out = x.reshape(t, n_heads, hd).copy()
        half = hd // 2
        for pos in range(t):
            for i in range(half):
                theta = pos * base ** (-2.0 * i / hd)
                c, s = np.cos(theta), np.sin(theta)
                even = out[pos, :, 2 * i].copy()
                odd = out[pos, :, 2 * i + 1].copy()
                out[pos, :, 2 * i] = even * c - odd * s
                out[pos, :, 2 * i + 1] = even * s + odd * c
        return out.reshape(t, d)

    embed = mat(weights.tok_embed)
    x = embed[np.asarray(tokens)]
    t = len(tokens)
    hd = config.d_model // config.n_heads
    for layer in weights.layers:
        xn = norm(x, np.asarray(layer.attn_norm.data, dtype=np.float64), config.rmsnorm_eps)
        q = rope(xn @ mat(layer.wq).T, config.n_heads, config.rope_base)
        k = rope(xn @ mat(layer.wk).T, config.n_heads, config.rope_base)
        v = xn @ mat(layer.wv).T
        attn = np.zeros_like(x)
        for h in range(config.n_heads):
            cols = slice(h * hd, (h + 1) * hd)
            scores = q[:, cols] @ k[:, cols].T / np.sqrt(hd)
            for i in range(t):
                scores[i, i + 1 :] = -np.inf
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            probs = e / e.sum(axis=1, keepdims=True)
            attn[:, cols] = probs @ v[:, cols]
        x = x + attn @ mat(layer.wo).T
        hn = norm(x, np.asarray(layer.ffn_norm.data, dtype=np.float64), config.rmsnorm_eps)
        g = hn @ mat(layer.w_gate).T
        u = hn @ mat(layer.w_up).T
        act = g / (1.0 + np.exp(-g)) * u
        x = x + act @ mat(layer.w_down).T
    final = norm(x, np.asarray(weights.final_norm.data, dtype=np.float64), config.rmsnorm_eps)
    return final @ embed.T
