"""Evaluation harness: clipped ground-truth perplexity, zero-shot
multiple-choice scoring, and the cross-model benchmark table.

Perplexity is exp of the mean per-token negative log-likelihood over the
response, clipped per record at 100 before averaging. Multiple choice uses
length-normalized log-likelihood of each choice continuation, zero-shot;
ties pick the lowest index. Scoring accepts anything exposing
``full_logits(tokens)`` and ``vocab_size``, which lets tests rig oracle
models without touching the transformer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tokenizer as tok
from .tokenizer import MergeTable

DEFAULT_CLIP = 100.0


class EvaluationError(ValueError):
    pass


@dataclass
class PplRecord:
    pair_id: int
    token_count: int
    nll: float  # mean negative log-likelihood, nats
    perplexity: float  # min(exp(nll), clip)


@dataclass
class PplSummary:
    scored: int
    skipped: list[dict]
    clip: float
    mean_clipped_perplexity: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "scored": self.scored,
                "skipped": self.skipped,
                "clip": self.clip,
                "mean_clipped_perplexity": self.mean_clipped_perplexity,
            }
        )


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    rows = logits.astype(np.float64)
    rows -= rows.max(axis=1, keepdims=True)
    return rows - np.log(np.exp(rows).sum(axis=1, keepdims=True))


def clipped_perplexity(
    model,
    merges: MergeTable,
    pairs,
    clip: float = DEFAULT_CLIP,
) -> tuple[list[PplRecord], PplSummary]:
    """Per-pair clipped perplexity of the response given BOS + prompt.

    Overlong or unscorable pairs are skipped with a warning record; they are
    counted, never silently dropped.
    """
    records: list[PplRecord] = []
    skipped: list[dict] = []
    for pair in pairs:
        prompt_ids = [tok.BOS_ID] + tok.encode(pair.prompt, merges)
        response_ids = tok.encode(pair.response, merges)
        if not response_ids:
            skipped.append({"id": pair.id, "reason": "empty_response"})
            continue
        ids = prompt_ids + response_ids
        if len(ids) > model.max_seq:
            skipped.append({"id": pair.id, "reason": "overlong"})
            continue
        logp = _log_softmax_rows(model.full_logits(ids))
        start = len(prompt_ids) - 1
        picked = logp[np.arange(start, start + len(response_ids)), response_ids]
        nll = float(-picked.mean())
        records.append(
            PplRecord(pair.id, len(response_ids), nll, min(float(np.exp(nll)), clip))
        )
    if records:
        mean_ppl = float(np.mean([r.perplexity for r in records]))
    else:
        mean_ppl = float("nan")
    return records, PplSummary(len(records), skipped, clip, mean_ppl)


@dataclass
class McItem:
    context: str
    choices: list[str]
    answer_index: int

    def __post_init__(self) -> None:
        if len(self.choices) < 2:
            raise ValueError("an item needs at least 2 choices")
        if any(not c for c in self.choices):
            raise ValueError("choices must be non-empty strings")
        if not (0 <= self.answer_index < len(self.choices)):
            raise ValueError(
                f"answer_index {self.answer_index} out of range for {len(self.choices)} choices"
            )


@dataclass
class McTask:
    name: str
    items: list[McItem]


def load_task(path, name: str | None = None) -> McTask:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                items.append(
                    McItem(record["context"], list(record["choices"]), int(record["answer_index"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise EvaluationError(f"{path}:{lineno}: bad task record: {exc}") from None
    return McTask(name or str(path), items)


def mc_score(model, merges: MergeTable, item: McItem) -> tuple[int, list[float]]:
    """Length-normalized log-likelihood per choice; argmax, ties -> lowest."""
    context_ids = [tok.BOS_ID] + tok.encode(item.context, merges)
    scores: list[float] = []
    for choice in item.choices:
        cont = tok.encode(choice, merges)
        ids = context_ids + cont
        if len(ids) > model.max_seq:
            raise EvaluationError("item overflows the context window")
        logp = _log_softmax_rows(model.full_logits(ids))
        start = len(context_ids) - 1
        picked = logp[np.arange(start, start + len(cont)), cont]
        scores.append(float(picked.mean()))
    chosen = int(np.argmax(scores))  # argmax returns the lowest index on ties
    return chosen, scores


@dataclass
class EvalResult:
    model: str
    task: str
    accuracy: float  # percentage, 1 decimal


def mc_accuracy(model, merges: MergeTable, task: McTask, model_name: str = "model") -> EvalResult:
    if not task.items:
        raise EvaluationError(f"task {task.name!r} has no items")
    correct = 0
    scored = 0
    skipped = 0
    for item in task.items:
        try:
            chosen, _ = mc_score(model, merges, item)
        except EvaluationError:
            skipped += 1
            continue
        scored += 1
        if chosen == item.answer_index:
            correct += 1
    if scored == 0:
        raise EvaluationError(f"every item in {task.name!r} was skipped")
    return EvalResult(model_name, task.name, round_half_away(100.0 * correct / scored, 1))


def round_half_away(value: float, decimals: int) -> float:
    factor = 10.0**decimals
    scaled = value * factor
    return (np.floor(scaled + 0.5) if scaled >= 0 else np.ceil(scaled - 0.5)) / factor


# ---------------------------------------------------------------------------
# Benchmark table
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkRow:
    model: str
    scores: dict[str, float]
    average: float
    relative_pct: float | None = None


@dataclass
class BenchmarkTable:
    tasks: list[str]
    rows: list[BenchmarkRow]
    reference_model: str | None = None


def report_table(
    results: list[EvalResult],
    reference_model: str | None = None,
) -> tuple[BenchmarkTable, str, str]:
    """Build the cross-model table. Returns (table, plain_text, csv).

    The average is the arithmetic mean of the per-task scores, rounded half
    away from zero to one decimal; the relative column is 100 * avg /
    reference_avg. Per-column maxima are starred in the plain-text render.
    """
    models: list[str] = []
    tasks: list[str] = []
    grid: dict[tuple[str, str], float] = {}
    for r in results:
        if r.model not in models:
            models.append(r.model)
        if r.task not in tasks:
            tasks.append(r.task)
        grid[(r.model, r.task)] = r.accuracy
    if not models or not tasks:
        raise EvaluationError("no results to tabulate")
    for m in models:
        for t in tasks:
            if (m, t) not in grid:
                raise EvaluationError(f"missing score for model {m!r} on task {t!r}")
    if reference_model is not None and reference_model not in models:
        raise EvaluationError(f"reference model {reference_model!r} has no results")

    rows = []
    for m in models:
        scores = {t: grid[(m, t)] for t in tasks}
        avg = round_half_away(sum(scores.values()) / len(tasks), 1)
        rows.append(BenchmarkRow(m, scores, avg))
    if reference_model is not None:
        ref_avg = next(r.average for r in rows if r.model == reference_model)
        for r in rows:
            r.relative_pct = round_half_away(100.0 * r.average / ref_avg, 1)

    table = BenchmarkTable(tasks, rows, reference_model)
    return table, _render_text(table), _render_csv(table)


def _render_text(table: BenchmarkTable) -> str:
    headers = ["Model"] + table.tasks + ["Avg"]
    if table.reference_model is not None:
        headers.append("Rel%")
    col_max = {t: max(r.scores[t] for r in table.rows) for t in table.tasks}
    max_avg = max(r.average for r in table.rows)

    def fmt(value: float, is_max: bool) -> str:
        s = f"{value:.1f}"
        return f"*{s}*" if is_max else s

    body = []
    for r in table.rows:
        cells = [r.model]
        cells += [fmt(r.scores[t], r.scores[t] == col_max[t]) for t in table.tasks]
        cells.append(fmt(r.average, r.average == max_avg))
        if table.reference_model is not None:
            cells.append(f"{r.relative_pct:.1f}")
        body.append(cells)

    widths = [max(len(row[i]) for row in [headers] + body) for i in range(len(headers))]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for cells in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _render_csv(table: BenchmarkTable) -> str:
    headers = ["model"] + table.tasks + ["average"]
    if table.reference_model is not None:
        headers.append("relative_pct")
    lines = [",".join(headers)]
    for r in table.rows:
        cells = [r.model] + [f"{r.scores[t]:.1f}" for t in table.tasks] + [f"{r.average:.1f}"]
        if table.reference_model is not None:
            cells.append(f"{r.relative_pct:.1f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_results(results: list[EvalResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({"model": r.model, "task": r.task, "accuracy": r.accuracy}) + "\n")


def read_results(path) -> list[EvalResult]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                out.append(EvalResult(record["model"], record["task"], float(record["accuracy"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise EvaluationError(f"{path}:{lineno}: bad result record: {exc}") from None
    return out
