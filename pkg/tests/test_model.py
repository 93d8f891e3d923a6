import numpy as np
import pytest

from deskllm.model import (
    ContextOverflowError,
    KVCache,
    ModelConfig,
    Transformer,
    dequantize_weights,
    forward,
    forward_full,
    new_random,
    quantize_weights,
)
from tests.conftest import reference_forward


def test_config_validation():
    with pytest.raises(ValueError, match="n_heads"):
        ModelConfig(300, 96, 1, 5, 64, 32)
    with pytest.raises(ValueError, match="multiples of 32"):
        ModelConfig(300, 48, 1, 2, 64, 32)
    with pytest.raises(ValueError, match="vocab_size"):
        ModelConfig(128, 32, 1, 2, 64, 32)
    with pytest.raises(ValueError, match="positive"):
        ModelConfig(300, 32, 0, 2, 64, 32)


def test_logits_shape(micro_model):
    weights, config = micro_model
    logits = forward(weights, config, [256, 10, 20], KVCache(config))
    assert logits.dims == (config.vocab_size,)


def test_forward_matches_independent_reference():
    config = ModelConfig(vocab_size=260, d_model=32, n_layers=1, n_heads=2, d_ff=32, max_seq=32)
    weights = new_random(config, seed=7)
    tokens = [256, 3, 7, 250, 42]
    got = forward_full(weights, config, tokens, KVCache(config))
    want = reference_forward(weights, config, tokens)
    assert np.abs(got - want).max() < 1e-5


def test_forward_reference_multilayer(micro_model):
    weights, config = micro_model
    tokens = [256, 1, 2, 3, 4, 5, 6, 7]
    got = forward_full(weights, config, tokens, KVCache(config))
    want = reference_forward(weights, config, tokens)
    assert np.abs(got - want).max() < 1e-5


def test_kv_cache_incremental_matches_full(micro_model):
    weights, config = micro_model
    rng = np.random.default_rng(0)
    tokens = [256] + list(rng.integers(0, config.vocab_size, 20))
    full = forward_full(weights, config, tokens, KVCache(config))

    cache = KVCache(config)
    last = None
    for i, t in enumerate(tokens):
        last = forward_full(weights, config, [t], cache)
    assert np.abs(last[0] - full[-1]).max() < 1e-4


def test_kv_cache_chunked_feeding(micro_model):
    weights, config = micro_model
    tokens = [256, 5, 9, 12, 40, 77, 3]
    full = forward_full(weights, config, tokens, KVCache(config))
    cache = KVCache(config)
    forward_full(weights, config, tokens[:3], cache)
    out = forward_full(weights, config, tokens[3:], cache)
    assert np.abs(out[-1] - full[-1]).max() < 1e-4


def test_causality(micro_model):
    weights, config = micro_model
    base = [256, 10, 20, 30, 40, 50]
    changed = base[:4] + [99, 98]
    a = forward_full(weights, config, base, KVCache(config))
    b = forward_full(weights, config, changed, KVCache(config))
    # positions 0..3 see identical context in both sequences
    assert np.abs(a[:4] - b[:4]).max() < 1e-6


def test_context_overflow(micro_model):
    weights, config = micro_model
    cache = KVCache(config)
    with pytest.raises(ContextOverflowError):
        forward_full(weights, config, [0] * (config.max_seq + 1), cache)
    forward_full(weights, config, [0] * config.max_seq, cache)
    with pytest.raises(ContextOverflowError):
        forward_full(weights, config, [0], cache)


def test_new_random_deterministic(micro_config):
    a = new_random(micro_config, seed=5)
    b = new_random(micro_config, seed=5)
    c = new_random(micro_config, seed=6)
    assert a.equal_bits(b)
    assert not a.equal_bits(c)


def test_quantized_forward_close_to_f32(micro_model):
    weights, config = micro_model
    qweights = quantize_weights(weights)
    assert qweights.is_quantized
    tokens = [256, 8, 9, 10]
    dense = forward_full(weights, config, tokens, KVCache(config))
    quant = forward_full(qweights, config, tokens, KVCache(config))
    # 4-bit weights shift logits, but not unboundedly
    assert np.abs(dense - quant).max() < 1.0
    assert np.all(np.isfinite(quant))


def test_quantized_incremental_matches_full(micro_model):
    weights, config = micro_model
    qweights = quantize_weights(weights)
    tokens = [256, 3, 1, 4, 1, 5]
    full = forward_full(qweights, config, tokens, KVCache(config))
    cache = KVCache(config)
    last = None
    for t in tokens:
        last = forward_full(qweights, config, [t], cache)
    assert np.abs(last[0] - full[-1]).max() < 1e-4


def test_dequantize_weights_roundtrip_structure(micro_model):
    weights, config = micro_model
    restored = dequantize_weights(quantize_weights(weights))
    assert not restored.is_quantized
    names = [n for n, _ in restored.named_tensors()]
    assert names == [n for n, _ in weights.named_tensors()]


def test_transformer_wrapper(micro_model):
    weights, config = micro_model
    model = Transformer(weights, config)
    assert model.vocab_size == config.vocab_size
    logits = model.full_logits([256, 1, 2])
    assert logits.shape == (3, config.vocab_size)
