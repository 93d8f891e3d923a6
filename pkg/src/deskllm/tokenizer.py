"""Byte-level BPE tokenizer with a lossless round-trip guarantee.

Ids 0-255 are raw bytes, 256/257/258 are BOS/EOS/PAD, and merges assign ids
from 259 upward in table order (earlier rows have higher priority). Because
the base vocabulary covers every byte, decode(encode(s)) == s for any valid
UTF-8 string with no out-of-vocabulary handling at all.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
FIRST_MERGE_ID = 259
SPECIAL_IDS = frozenset({BOS_ID, EOS_ID, PAD_ID})


class VocabularyError(ValueError):
    """A token id is not defined by the merge table."""


@dataclass
class MergeTable:
    """Ordered merge rules. Row i maps (left, right) -> 259 + i."""

    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for i, (left, right) in enumerate(self.merges):
            new_id = FIRST_MERGE_ID + i
            for ref in (left, right):
                if not (0 <= ref < new_id):
                    raise VocabularyError(
                        f"merge {i} references id {ref}, not defined before {new_id}"
                    )

    @property
    def vocab_size(self) -> int:
        return FIRST_MERGE_ID + len(self.merges)

    def __len__(self) -> int:
        return len(self.merges)


def encode(text: str, merges: MergeTable) -> list[int]:
    """Tokenize UTF-8 text: raw bytes, then greedy highest-priority merging.

    Each round applies the highest-priority merge present anywhere in the
    sequence, replacing occurrences left to right, until no rule applies.
    """
    ids = list(text.encode("utf-8"))
    if not ids or not merges.merges:
        return ids
    priority: dict[tuple[int, int], int] = {}
    for i, pair in enumerate(merges.merges):
        priority.setdefault(pair, i)  # a duplicated rule fires at its first priority
    while len(ids) > 1:
        best = None
        for pair in zip(ids, ids[1:]):
            p = priority.get(pair)
            if p is not None and (best is None or p < best):
                best = p
        if best is None:
            break
        pair = merges.merges[best]
        ids = _merge_all(ids, pair, FIRST_MERGE_ID + best)
    return ids


def _merge_all(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out: list[int] = []
    i = 0
    n = len(ids)
    while i < n:
        if i + 1 < n and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def decode(ids: list[int], merges: MergeTable) -> str:
    """Expand ids to bytes and decode as UTF-8; bad byte runs become U+FFFD."""
    return bytes(decode_bytes(ids, merges)).decode("utf-8", errors="replace")


def decode_bytes(ids: list[int], merges: MergeTable) -> bytes:
    out = bytearray()
    expansions: dict[int, bytes] = {}
    for i in ids:
        out += _expand(i, merges, expansions)
    return bytes(out)


def _expand(token: int, merges: MergeTable, memo: dict[int, bytes]) -> bytes:
    if 0 <= token < 256:
        return bytes([token])
    if token in SPECIAL_IDS:
        return b""
    if not (FIRST_MERGE_ID <= token < merges.vocab_size):
        raise VocabularyError(f"token id {token} is not in the vocabulary")
    cached = memo.get(token)
    if cached is not None:
        return cached
    left, right = merges.merges[token - FIRST_MERGE_ID]
    result = _expand(left, merges, memo) + _expand(right, merges, memo)
    memo[token] = result
    return result


# ---------------------------------------------------------------------------
# merges.txt import/export: one merge per line, "left right", priority = order
# ---------------------------------------------------------------------------


def load_merges_txt(path) -> MergeTable:
    merges: list[tuple[int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'left right', got {line!r}")
            try:
                merges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: ids must be integers") from None
    return MergeTable(merges)


def save_merges_txt(merges: MergeTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for left, right in merges.merges:
            fh.write(f"{left} {right}\n")


def train_merges(texts: list[str], n_merges: int) -> MergeTable:
    """Frequency-greedy merge learner. A convenience for tests and demos;
    the learned table carries no compatibility promise."""
    seqs = [list(t.encode("utf-8")) for t in texts if t]
    merges: list[tuple[int, int]] = []
    for step in range(n_merges):
        counts: Counter[tuple[int, int]] = Counter()
        for seq in seqs:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            break
        # Deterministic: max count, ties broken by smallest pair.
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if counts[best] < 2:
            break
        new_id = FIRST_MERGE_ID + len(merges)
        merges.append(best)
        seqs = [_merge_all(seq, best, new_id) for seq in seqs]
    return MergeTable(merges)
