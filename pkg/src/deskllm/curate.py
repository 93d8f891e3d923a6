"""Prompt-response dataset curation.

The pipeline runs fixed stages in order — refusal patterns, malformed text,
too-short responses, then exact and near deduplication — and accounts for
every input pair exactly once. Near-duplicate candidates come from MinHash
banding, but removal is always decided by the true shingle-set Jaccard, so
the behavior is checkable against a brute-force oracle.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
from dataclasses import dataclass, field

import numpy as np

_WS = re.compile(r"\s+")
# Control characters other than tab/newline mark malformed output, as do
# stray UTF-16 surrogates that survived a bad decode.
_BAD_CHARS = re.compile(r"[\x00-\x08\x0b-\x1f\x7f\ud800-\udfff]")
_SLOT = re.compile(r"\[([^\[\]]+)\]")

_MINHASH_SEED = 0x5EED_D00D
_FEATURE_DIM = 1024
_POWER_ITERATIONS = 100


class IngestError(ValueError):
    """Input file violates the newline-delimited record format."""


class SchemaError(ValueError):
    """Template references a slot with no value list."""


@dataclass
class PromptResponsePair:
    prompt: str
    response: str
    source: str = ""
    id: int = 0


@dataclass
class CurationConfig:
    refusal_patterns: tuple[str, ...] = (
        "as an ai language model",
        "i cannot",
        "i'm sorry, but",
    )
    min_chars: int = 16
    min_words: int = 3
    near_dup_jaccard: float = 0.9
    shingle_words: int = 3
    minhash_permutations: int = 128

    def __post_init__(self) -> None:
        if self.min_chars <= 0 or self.min_words <= 0 or self.shingle_words <= 0:
            raise ValueError("thresholds must be positive")
        if not (0 < self.near_dup_jaccard <= 1):
            raise ValueError(f"near_dup_jaccard must be in (0, 1], got {self.near_dup_jaccard}")
        if self.minhash_permutations < 8 or self.minhash_permutations % 8 != 0:
            raise ValueError("minhash_permutations must be a positive multiple of 8")


@dataclass
class CurationReport:
    counts: dict[str, int]
    per_source: dict[str, dict[str, int]]
    examples: dict[str, list[dict]]

    def to_json(self) -> str:
        return json.dumps(
            {"counts": self.counts, "per_source": self.per_source, "examples": self.examples},
            indent=2,
            ensure_ascii=False,
        )


@dataclass
class SchemaTemplate:
    template: str
    slots: dict[str, list[str]] = field(default_factory=dict)


def ingest(path) -> list[PromptResponsePair]:
    """Strictly parse newline-delimited records with prompt/response fields."""
    pairs: list[PromptResponsePair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"line {lineno}: invalid record: {exc.msg}") from None
            if not isinstance(record, dict):
                raise IngestError(f"line {lineno}: record must be an object")
            for key in ("prompt", "response"):
                if key not in record:
                    raise IngestError(f"line {lineno}: missing field {key!r}")
                if not isinstance(record[key], str):
                    raise IngestError(f"line {lineno}: field {key!r} must be a string")
            source = record.get("source", "")
            if not isinstance(source, str):
                raise IngestError(f"line {lineno}: field 'source' must be a string")
            pairs.append(
                PromptResponsePair(record["prompt"], record["response"], source, id=len(pairs))
            )
    return pairs


def write_pairs(pairs: list[PromptResponsePair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(
                {"prompt": p.prompt, "response": p.response, "source": p.source},
                ensure_ascii=False,
            ) + "\n")


def filter_refusals(pairs, config: CurationConfig):
    patterns = [p.lower() for p in config.refusal_patterns]
    kept, removed = [], []
    for pair in pairs:
        low = pair.response.lower()
        (removed if any(p in low for p in patterns) else kept).append(pair)
    return kept, removed


def filter_malformed(pairs):
    kept, removed = [], []
    for pair in pairs:
        bad = (
            not pair.response.strip()
            or not pair.prompt.strip()
            or _BAD_CHARS.search(pair.response) is not None
            or _BAD_CHARS.search(pair.prompt) is not None
        )
        (removed if bad else kept).append(pair)
    return kept, removed


def filter_short(pairs, config: CurationConfig):
    kept, removed = [], []
    for pair in pairs:
        trimmed = pair.response.strip()
        bad = len(trimmed.split()) < config.min_words or len(trimmed) < config.min_chars
        (removed if bad else kept).append(pair)
    return kept, removed


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text.lower()).strip()


def _pair_text(pair: PromptResponsePair) -> str:
    return normalize_text(pair.prompt + "\n" + pair.response)


def shingle_set(text: str, shingle_words: int) -> frozenset[tuple[str, ...]]:
    words = text.split()
    if not words:
        return frozenset()
    if len(words) < shingle_words:
        return frozenset({tuple(words)})
    return frozenset(
        tuple(words[i : i + shingle_words]) for i in range(len(words) - shingle_words + 1)
    )


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def _shingle_hashes(shingles: frozenset[tuple[str, ...]]) -> np.ndarray:
    out = np.empty(len(shingles), dtype=np.uint64)
    for i, sh in enumerate(sorted(shingles)):
        digest = hashlib.blake2b("\x1f".join(sh).encode("utf-8"), digest_size=8).digest()
        out[i] = int.from_bytes(digest, "little")
    return out


def _minhash_signature(hashes: np.ndarray, coeffs: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    # Multiply-shift permutations in the 2^64 ring; odd multipliers keep
    # the map a bijection, and uint64 wraparound is the modulus.
    a, b = coeffs
    with np.errstate(over="ignore"):
        table = a[:, None] * hashes[None, :] + b[:, None]
    return table.min(axis=1)


def _minhash_coeffs(n_perm: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(_MINHASH_SEED))
    a = rng.integers(1, 1 << 63, size=n_perm, dtype=np.uint64) * np.uint64(2) + np.uint64(1)
    b = rng.integers(0, 1 << 63, size=n_perm, dtype=np.uint64)
    return a, b


def dedup(pairs, config: CurationConfig):
    """Exact then near dedup. Returns (kept, removed_exact, removed_near).

    Near candidates come from LSH banding (8 rows per band); a candidate
    pair is removed only if its true shingle Jaccard clears the threshold,
    keeping the lowest id per duplicate cluster.
    """
    kept_exact: list[PromptResponsePair] = []
    removed_exact: list[PromptResponsePair] = []
    seen: dict[str, int] = {}
    for pair in pairs:
        text = _pair_text(pair)
        if text in seen:
            removed_exact.append(pair)
        else:
            seen[text] = pair.id
            kept_exact.append(pair)

    shingles = {p.id: shingle_set(_pair_text(p), config.shingle_words) for p in kept_exact}
    coeffs = _minhash_coeffs(config.minhash_permutations)
    n_bands = config.minhash_permutations // 8
    buckets: dict[tuple[int, bytes], list[int]] = {}
    for pair in kept_exact:
        sh = shingles[pair.id]
        if not sh:
            continue
        sig = _minhash_signature(_shingle_hashes(sh), coeffs)
        for band in range(n_bands):
            key = (band, sig[band * 8 : (band + 1) * 8].tobytes())
            buckets.setdefault(key, []).append(pair.id)

    candidates: set[tuple[int, int]] = set()
    for ids in buckets.values():
        if len(ids) > 1:
            candidates.update(itertools.combinations(sorted(ids), 2))

    parent: dict[int, int] = {p.id: p.id for p in kept_exact}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for lo, hi in sorted(candidates):
        if jaccard(shingles[lo], shingles[hi]) >= config.near_dup_jaccard:
            ra, rb = find(lo), find(hi)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    kept, removed_near = [], []
    for pair in kept_exact:
        (kept if find(pair.id) == pair.id else removed_near).append(pair)
    return kept, removed_exact, removed_near


_STAGES = ("removed_refusal", "removed_malformed", "removed_short", "removed_exact_dup", "removed_near_dup")


def curate_pipeline(pairs, config: CurationConfig):
    """Fixed stage order: refusal, malformed, short, dedup. Kept pairs stay
    in input order; every input lands in exactly one report bucket."""
    pairs = list(pairs)
    stage1, refusals = filter_refusals(pairs, config)
    stage2, malformed = filter_malformed(stage1)
    stage3, short = filter_short(stage2, config)
    kept, exact, near = dedup(stage3, config)

    removals = {
        "removed_refusal": refusals,
        "removed_malformed": malformed,
        "removed_short": short,
        "removed_exact_dup": exact,
        "removed_near_dup": near,
    }
    counts = {"input": len(pairs), "kept": len(kept)}
    counts.update({stage: len(items) for stage, items in removals.items()})

    per_source: dict[str, dict[str, int]] = {}
    for stage, items in [("kept", kept)] + list(removals.items()):
        for pair in items:
            bucket = per_source.setdefault(pair.source, {s: 0 for s in _STAGES} | {"kept": 0, "input": 0})
            bucket[stage] += 1
            bucket["input"] += 1

    examples = {
        stage: [
            {"id": p.id, "prompt": p.prompt[:80], "response": p.response[:80]}
            for p in items[:5]
        ]
        for stage, items in removals.items()
    }
    return kept, CurationReport(counts, per_source, examples)


def schema_expand(template: SchemaTemplate, limit: int | None = None, seed: int = 0) -> list[str]:
    """Fill bracketed slots with the Cartesian product of their value lists.

    If the product exceeds ``limit``, a seeded uniform sample without
    replacement of exactly ``limit`` prompts is returned (in product order).
    """
    names: list[str] = []
    for match in _SLOT.finditer(template.template):
        name = match.group(1)
        if name not in template.slots:
            raise SchemaError(f"template slot [{name}] has no value list")
        if name not in names:
            names.append(name)
    if not names:
        return [template.template]

    pools = [template.slots[n] for n in names]
    total = 1
    for pool in pools:
        if not pool:
            raise SchemaError(f"slot [{names[pools.index(pool)]}] has an empty value list")
        total *= len(pool)

    if limit is not None and total > limit:
        rng = np.random.Generator(np.random.PCG64(seed))
        chosen = np.sort(rng.choice(total, size=limit, replace=False))
    else:
        chosen = range(total)

    out = []
    for index in chosen:
        combo = {}
        rest = int(index)
        for name, pool in zip(reversed(names), reversed(pools)):
            combo[name] = pool[rest % len(pool)]
            rest //= len(pool)
        out.append(_SLOT.sub(lambda m: combo[m.group(1)], template.template))
    return out


def project_2d(pairs) -> np.ndarray:
    """Deterministic 2-D map of the corpus: hashed term-frequency features,
    mean-centering, and two power-iteration principal directions."""
    if len(pairs) < 2:
        raise ValueError("projection needs at least 2 pairs")
    features = np.zeros((len(pairs), _FEATURE_DIM), dtype=np.float64)
    for row, pair in enumerate(pairs):
        for word in _pair_text(pair).split():
            digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8, key=b"deskllm-map").digest()
            features[row, int.from_bytes(digest, "little") % _FEATURE_DIM] += 1.0
    centered = features - features.mean(axis=0, keepdims=True)

    coords = np.empty((len(pairs), 2), dtype=np.float64)
    work = centered
    for component in range(2):
        v = np.ones(_FEATURE_DIM) / np.sqrt(_FEATURE_DIM)
        for _ in range(_POWER_ITERATIONS):
            v = work.T @ (work @ v)
            norm = np.linalg.norm(v)
            if norm == 0:
                break
            v /= norm
        peak = int(np.argmax(np.abs(v)))
        if v[peak] < 0:
            v = -v
        coords[:, component] = centered @ v
        work = work - np.outer(work @ v, v)
    return coords


def write_projection_csv(pairs, coords: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,x,y\n")
        for pair, (x, y) in zip(pairs, coords):
            fh.write(f"{pair.id},{x:.6f},{y:.6f}\n")
