"""Sampling and the autoregressive generation loop.

The sampling pipeline order is fixed: repetition penalty, temperature,
top-k, top-p, then a draw from the renormalized distribution with a seeded
generator. Greedy decoding (temperature 0) is bitwise reproducible; sampled
output is reproducible for a fixed seed within this implementation (the
PRNG is deliberately unspecified across implementations).
"""

from __future__ import annotations

import codecs
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tokenizer as tok
from .model import KVCache, Transformer
from .tensor import Tensor

# Transcript template shared by the CLI chat REPL and the web UI (the UI
# carries a verbatim copy; an e2e test keeps the two in sync).
PROMPT_HEADER = "### Prompt:\n"
RESPONSE_HEADER = "### Response:\n"


def render_turn(user_text: str) -> str:
    return f"{PROMPT_HEADER}{user_text}\n{RESPONSE_HEADER}"


def render_transcript(turns: list[tuple[str, str]], next_user: str) -> str:
    """Flatten completed (user, assistant) turns plus the next user message."""
    parts = [f"{render_turn(u)}{a}\n" for u, a in turns]
    parts.append(render_turn(next_user))
    return "".join(parts)


@dataclass(frozen=True)
class SamplerParams:
    temperature: float = 1.0
    top_k: int = 0
    top_p: float = 1.0
    repetition_penalty: float = 1.0
    seed: int = 0
    max_tokens: int = 128
    stop_ids: frozenset[int] = frozenset({tok.EOS_ID})

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")
        if not (0 < self.top_p <= 1):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.repetition_penalty < 1:
            raise ValueError(f"repetition_penalty must be >= 1, got {self.repetition_penalty}")
        if self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed}")
        if self.max_tokens < 0:
            raise ValueError(f"max_tokens must be >= 0, got {self.max_tokens}")


def sample(
    logits: Tensor,
    params: SamplerParams,
    history: dict[int, int] | set[int],
    rng: np.random.Generator,
) -> int:
    """One draw from the sampling pipeline. ``history`` holds generated ids."""
    values = logits.data.astype(np.float32).copy()

    if params.repetition_penalty > 1:
        penalty = np.float32(params.repetition_penalty)
        for token in set(history):
            v = values[token]
            values[token] = v / penalty if v > 0 else v * penalty

    if params.temperature == 0:
        return int(np.argmax(values))  # argmax takes the lowest index on ties
    values /= np.float32(params.temperature)

    order = np.lexsort((np.arange(values.size), -values))  # desc value, asc index
    if params.top_k > 0:
        order = order[: params.top_k]

    kept = values[order].astype(np.float64)
    probs = np.exp(kept - kept.max())
    probs /= probs.sum()
    if params.top_p < 1:
        cum = np.cumsum(probs)
        cut = int(np.searchsorted(cum, params.top_p, side="left")) + 1
        order = order[:cut]
        probs = probs[:cut] / probs[:cut].sum()

    draw = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), draw, side="right"))
    return int(order[min(idx, len(order) - 1)])


@dataclass
class GenerationResult:
    """Final text is exactly the concatenation of the streamed fragments.

    A trailing byte run that never completed a UTF-8 character is not part
    of the text (the raw bytes remain recoverable from token_ids).
    """

    text: str
    token_ids: list[int]
    finish_reason: str  # stop_token | max_tokens | cancelled


class ContextLengthError(ValueError):
    """Prompt does not leave room for max_tokens within max_seq."""


def generate(
    model: Transformer,
    merges: tok.MergeTable,
    prompt: str,
    params: SamplerParams,
    on_token: Callable[[int, str], object] | None = None,
    cancel: threading.Event | None = None,
) -> GenerationResult:
    """Prime BOS + prompt through a fresh KV cache, then sample until a stop
    token, the token budget, or cancellation.

    ``on_token`` receives each token id and its decoded text fragment; a
    False return or an exception cancels generation. ``cancel`` is polled
    once per token. Streamed fragments concatenate to the returned text.
    """
    prompt_ids = [tok.BOS_ID] + tok.encode(prompt, merges)
    if len(prompt_ids) + params.max_tokens > model.max_seq:
        raise ContextLengthError(
            f"prompt needs {len(prompt_ids)} tokens + {params.max_tokens} budget "
            f"> max_seq {model.max_seq}"
        )

    rng = np.random.Generator(np.random.PCG64(params.seed))
    cache = model.new_cache()
    generated: list[int] = []
    history: set[int] = set()
    pieces: list[str] = []
    # Incomplete UTF-8 sequences buffer until the next token completes them.
    decoder = codecs.getincrementaldecoder("utf-8")("replace")

    finish = "max_tokens"
    next_input = prompt_ids
    for _ in range(params.max_tokens):
        if cancel is not None and cancel.is_set():
            finish = "cancelled"
            break
        logits = model.forward(next_input, cache)
        token = sample(logits, params, history, rng)
        generated.append(token)
        history.add(token)
        next_input = [token]
        # ids past the merge table are model-internal (vocab_size may exceed
        # the defined vocabulary); they carry no text, like the specials
        raw = tok.decode_bytes([token], merges) if token < merges.vocab_size else b""
        fragment = decoder.decode(raw, False)
        if fragment:
            pieces.append(fragment)
        if on_token is not None:
            try:
                keep_going = on_token(token, fragment)
            except Exception:
                finish = "cancelled"
                break
            if keep_going is False:
                finish = "cancelled"
                break
        if token in params.stop_ids:
            finish = "stop_token"
            break

    return GenerationResult("".join(pieces), generated, finish)
