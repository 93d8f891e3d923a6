import threading

import numpy as np
import pytest

from deskllm import tensor, tokenizer as tok
from deskllm.generate import (
    ContextLengthError,
    SamplerParams,
    generate,
    render_transcript,
    render_turn,
    sample,
)
from deskllm.model import ModelConfig, Transformer, new_random
from deskllm.tensor import Tensor
from deskllm.tokenizer import MergeTable


def logits_of(values):
    arr = np.asarray(values, dtype=np.float32)
    return Tensor((arr.size,), arr)


def rng_with(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def test_params_validation():
    SamplerParams()
    with pytest.raises(ValueError):
        SamplerParams(temperature=-0.1)
    with pytest.raises(ValueError):
        SamplerParams(top_k=-1)
    with pytest.raises(ValueError):
        SamplerParams(top_p=0.0)
    with pytest.raises(ValueError):
        SamplerParams(top_p=1.5)
    with pytest.raises(ValueError):
        SamplerParams(repetition_penalty=0.5)
    with pytest.raises(ValueError):
        SamplerParams(max_tokens=-1)


def test_greedy_argmax():
    params = SamplerParams(temperature=0.0)
    assert sample(logits_of([1, 3, 2]), params, set(), rng_with()) == 1


def test_greedy_tie_takes_lowest_index():
    params = SamplerParams(temperature=0.0)
    assert sample(logits_of([5, 7, 7, 7]), params, set(), rng_with()) == 1


def test_greedy_invariant_under_rescaling():
    params = SamplerParams(temperature=0.0)
    base = np.array([0.3, -1.2, 2.5, 0.9], dtype=np.float32)
    ref = sample(logits_of(base), params, set(), rng_with())
    for scale in (0.01, 3.0, 1000.0):
        assert sample(logits_of(base * scale), params, set(), rng_with()) == ref


def test_top_k_excludes_low_logits():
    params = SamplerParams(temperature=1.0, top_k=2, seed=0)
    counts = [0, 0, 0]
    rng = rng_with(42)
    for _ in range(10_000):
        counts[sample(logits_of([1, 3, 2]), params, set(), rng)] += 1
    assert counts[0] == 0
    assert counts[1] > counts[2] > 0


def test_repetition_penalty_divides_positive_multiplies_negative():
    params = SamplerParams(temperature=0.0, repetition_penalty=2.0)
    # token 1 penalized: 4 -> 2, so token 0 with 3 wins
    assert sample(logits_of([3.0, 4.0]), params, {1}, rng_with()) == 0
    # negative logits move further down: -1 -> -2
    got = sample(logits_of([-1.0, -1.5]), params, {0}, rng_with())
    assert got == 1


def test_top_p_keeps_minimal_prefix():
    # softmax of [2, 1, 0, -5] puts ~0.665 on token 0, so top_p=0.6 keeps
    # only token 0 while top_p=0.7 needs tokens 0 and 1
    rng = rng_with(7)
    narrow = SamplerParams(temperature=1.0, top_p=0.6, seed=1)
    seen = {sample(logits_of([2.0, 1.0, 0.0, -5.0]), narrow, set(), rng) for _ in range(2000)}
    assert seen == {0}
    wide = SamplerParams(temperature=1.0, top_p=0.7, seed=1)
    seen = {sample(logits_of([2.0, 1.0, 0.0, -5.0]), wide, set(), rng) for _ in range(2000)}
    assert seen == {0, 1}


def test_full_candidate_set_equals_plain_temperature():
    # top_k = vocab and top_p = 1 leave the distribution untouched
    values = np.array([0.5, -0.25, 1.25, 0.0], dtype=np.float32)
    plain = SamplerParams(temperature=0.8, seed=3)
    gated = SamplerParams(temperature=0.8, top_k=4, top_p=1.0, seed=3)
    a = [sample(logits_of(values), plain, set(), rng_with(99)) for _ in range(500)]
    b = [sample(logits_of(values), gated, set(), rng_with(99)) for _ in range(500)]
    assert a == b


def test_seeded_sampling_reproducible():
    values = np.linspace(-1, 1, 50).astype(np.float32)
    params = SamplerParams(temperature=1.3, top_k=10, top_p=0.9, seed=5)
    run1 = [sample(logits_of(values), params, set(), rng_with(5)) for _ in range(50)]
    run2 = [sample(logits_of(values), params, set(), rng_with(5)) for _ in range(50)]
    assert run1 == run2


@pytest.fixture
def small_lm():
    config = ModelConfig(vocab_size=300, d_model=32, n_layers=1, n_heads=2, d_ff=32, max_seq=64)
    return Transformer(new_random(config, seed=77), config), MergeTable()


def test_generate_zero_budget(small_lm):
    model, merges = small_lm
    result = generate(model, merges, "hi", SamplerParams(temperature=0.0, max_tokens=0))
    assert result.text == ""
    assert result.token_ids == []
    assert result.finish_reason == "max_tokens"


def test_generate_greedy_deterministic_across_runs_and_workers(small_lm):
    model, merges = small_lm
    params = SamplerParams(temperature=0.0, max_tokens=24)
    tensor.set_num_threads(1)
    ref = generate(model, merges, "abc", params)
    try:
        for workers in (1, 4):
            tensor.set_num_threads(workers)
            again = generate(model, merges, "abc", params)
            assert again.token_ids == ref.token_ids
            assert again.text == ref.text
    finally:
        tensor.set_num_threads(1)


def test_generate_stop_token(small_lm):
    model, merges = small_lm
    # bias the embedding so EOS dominates every step
    model.weights.tok_embed.data.reshape(model.config.vocab_size, -1)[tok.EOS_ID, :] = 5.0
    result = generate(model, merges, "x", SamplerParams(temperature=0.0, max_tokens=16))
    assert result.finish_reason == "stop_token"
    assert result.token_ids[-1] == tok.EOS_ID
    assert len(result.token_ids) == 1


def test_streamed_fragments_concatenate_to_text(small_lm):
    model, merges = small_lm
    fragments = []
    result = generate(
        model, merges, "hello",
        SamplerParams(temperature=0.9, seed=11, max_tokens=32),
        on_token=lambda token, text: fragments.append(text),
    )
    assert "".join(fragments) == result.text


def test_callback_false_cancels(small_lm):
    model, merges = small_lm
    result = generate(
        model, merges, "hello",
        SamplerParams(temperature=0.0, max_tokens=32),
        on_token=lambda token, text: False,
    )
    assert result.finish_reason == "cancelled"
    assert len(result.token_ids) == 1


def test_callback_exception_cancels(small_lm):
    model, merges = small_lm

    def boom(token, text):
        raise RuntimeError("stream broke")

    result = generate(model, merges, "hello", SamplerParams(temperature=0.0, max_tokens=32), on_token=boom)
    assert result.finish_reason == "cancelled"


def test_cancel_event_stops_within_one_token(small_lm):
    model, merges = small_lm
    cancel = threading.Event()
    seen = []

    def watch(token, text):
        seen.append(token)
        if len(seen) == 3:
            cancel.set()
        return True

    result = generate(
        model, merges, "hello",
        SamplerParams(temperature=0.0, max_tokens=32),
        on_token=watch, cancel=cancel,
    )
    assert result.finish_reason == "cancelled"
    assert len(result.token_ids) == 3


def test_prompt_overflow_rejected(small_lm):
    model, merges = small_lm
    with pytest.raises(ContextLengthError):
        generate(model, merges, "x" * 100, SamplerParams(max_tokens=10))


def test_chat_template_rendering():
    assert render_turn("hi") == "### Prompt:\nhi\n### Response:\n"
    transcript = render_transcript([("q1", "a1")], "q2")
    assert transcript == (
        "### Prompt:\nq1\n### Response:\na1\n"
        "### Prompt:\nq2\n### Response:\n"
    )
