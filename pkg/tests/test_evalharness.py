import numpy as np
import pytest

from deskllm.curate import PromptResponsePair
from deskllm.evalharness import (
    EvalResult,
    EvaluationError,
    McItem,
    McTask,
    clipped_perplexity,
    load_task,
    mc_accuracy,
    mc_score,
    read_results,
    report_table,
    round_half_away,
    write_results,
)
from deskllm.tokenizer import MergeTable


class UniformModel:
    """Identical logits everywhere: every token has probability 1/vocab."""

    def __init__(self, vocab_size=259, max_seq=4096):
        self.vocab_size = vocab_size
        self.max_seq = max_seq

    def full_logits(self, tokens):
        return np.zeros((len(tokens), self.vocab_size), dtype=np.float32)


class TeacherForcingModel:
    """Assigns probability ~1 to the observed next token at every position."""

    def __init__(self, vocab_size=259, max_seq=4096):
        self.vocab_size = vocab_size
        self.max_seq = max_seq

    def full_logits(self, tokens):
        out = np.zeros((len(tokens), self.vocab_size), dtype=np.float32)
        for t in range(len(tokens) - 1):
            out[t, tokens[t + 1]] = 200.0
        return out


class KnowsAnswersModel:
    """Teacher-forces only sequences it has been told are correct."""

    def __init__(self, correct_sequences, vocab_size=259, max_seq=4096):
        self.correct = {tuple(s) for s in correct_sequences}
        self.vocab_size = vocab_size
        self.max_seq = max_seq

    def full_logits(self, tokens):
        if tuple(tokens) in self.correct:
            return TeacherForcingModel(self.vocab_size).full_logits(tokens)
        return np.zeros((len(tokens), self.vocab_size), dtype=np.float32)


def make_pair(prompt, response, id=0):
    return PromptResponsePair(prompt, response, "test", id)


# -- perplexity ---------------------------------------------------------------


def test_perfect_model_perplexity_one():
    records, summary = clipped_perplexity(
        TeacherForcingModel(), MergeTable(), [make_pair("q", "abcdef")]
    )
    assert len(records) == 1
    assert records[0].perplexity == pytest.approx(1.0, abs=1e-6)
    assert summary.mean_clipped_perplexity == pytest.approx(1.0, abs=1e-6)


def test_uniform_model_vocab_259_clips_to_exactly_100():
    records, summary = clipped_perplexity(
        UniformModel(vocab_size=259), MergeTable(), [make_pair("q", "hello world")]
    )
    assert records[0].nll == pytest.approx(np.log(259), abs=1e-9)
    assert records[0].perplexity == 100.0
    assert summary.mean_clipped_perplexity == 100.0


def test_uniform_small_vocab_not_clipped():
    # perplexity before clipping equals vocab size within 1e-9
    records, _ = clipped_perplexity(
        UniformModel(vocab_size=300), MergeTable(), [make_pair("q", "xyz")], clip=400.0
    )
    assert records[0].perplexity == pytest.approx(300.0, abs=1e-9 * 300)


def test_single_token_probability_quarter_gives_four():
    class QuarterModel:
        vocab_size = 259
        max_seq = 4096

        def full_logits(self, tokens):
            out = np.full((len(tokens), 259), -1e9, dtype=np.float32)
            # four equally likely tokens, one of which is the target byte "a"
            out[:, [ord("a"), ord("b"), ord("c"), ord("d")]] = 0.0
            return out

    records, _ = clipped_perplexity(QuarterModel(), MergeTable(), [make_pair("q", "a")])
    assert records[0].token_count == 1
    assert records[0].perplexity == pytest.approx(4.0, abs=1e-9)


def test_overlong_pair_skipped_with_warning():
    model = UniformModel(max_seq=8)
    records, summary = clipped_perplexity(
        model, MergeTable(), [make_pair("very long prompt here", "and a long response", id=7)]
    )
    assert records == []
    assert summary.skipped == [{"id": 7, "reason": "overlong"}]


def test_empty_response_skipped():
    records, summary = clipped_perplexity(UniformModel(), MergeTable(), [make_pair("q", "", id=3)])
    assert summary.skipped == [{"id": 3, "reason": "empty_response"}]


def test_perplexity_at_least_one_and_clip_applies_per_record():
    records, summary = clipped_perplexity(
        UniformModel(vocab_size=400),
        MergeTable(),
        [make_pair("q", "abc", id=0), make_pair("q", "defg", id=1)],
        clip=100.0,
    )
    assert all(r.perplexity == 100.0 for r in records)
    assert summary.mean_clipped_perplexity == 100.0


# -- multiple choice ------------------------------------------------------------


def test_mc_item_validation():
    with pytest.raises(ValueError):
        McItem("ctx", ["only one"], 0)
    with pytest.raises(ValueError):
        McItem("ctx", ["a", ""], 0)
    with pytest.raises(ValueError):
        McItem("ctx", ["a", "b"], 2)


def test_mc_uniform_scores_are_neg_log_vocab():
    model = UniformModel(vocab_size=300)
    item = McItem("the sky is", [" blue", " very definitely green"], 0)
    chosen, scores = mc_score(model, MergeTable(), item)
    assert chosen == 0  # exact tie resolves to the lowest index
    for s in scores:
        assert s == pytest.approx(-np.log(300), abs=1e-9)


def test_mc_teacher_forced_choice_scores_zero():
    model = TeacherForcingModel()
    item = McItem("ctx", ["aa", "bb"], 0)
    chosen, scores = mc_score(model, MergeTable(), item)
    assert chosen == 0
    assert scores[0] == pytest.approx(0.0, abs=1e-6)


def test_mc_picks_known_correct_choice():
    from deskllm import tokenizer as tok

    merges = MergeTable()
    items = [
        McItem("question one", ["paris", "tokyo"], 0),
        McItem("question two", ["red", "blue"], 1),
    ]
    correct = []
    for item in items:
        ctx = [tok.BOS_ID] + tok.encode(item.context, merges)
        answer = item.choices[item.answer_index]
        correct.append(ctx + tok.encode(answer, merges))
    model = KnowsAnswersModel(correct)
    result = mc_accuracy(model, merges, McTask("toy", items), "rigged")
    assert result.accuracy == 100.0


def test_mc_balanced_uniform_gives_quarter():
    model = UniformModel()
    items = [
        McItem(f"item {i}", ["aa", "bb", "cc", "dd"], i % 4)
        for i in range(400)
    ]
    result = mc_accuracy(model, MergeTable(), McTask("balanced", items), "uniform")
    assert result.accuracy == 25.0


def test_mc_empty_task_rejected():
    with pytest.raises(EvaluationError):
        mc_accuracy(UniformModel(), MergeTable(), McTask("empty", []))


def test_identical_token_sequences_give_identical_scores():
    model = UniformModel()
    item_a = McItem("ctx", ["same text", "other words"], 0)
    item_b = McItem("ctx", ["same text", "other words"], 1)
    _, scores_a = mc_score(model, MergeTable(), item_a)
    _, scores_b = mc_score(model, MergeTable(), item_b)
    assert scores_a == scores_b


def test_load_task(tmp_path):
    f = tmp_path / "task.ndjson"
    f.write_text(
        '{"context": "c1", "choices": ["a", "b"], "answer_index": 0}\n'
        '{"context": "c2", "choices": ["x", "y", "z"], "answer_index": 2}\n'
    )
    task = load_task(f, "demo")
    assert task.name == "demo"
    assert len(task.items) == 2
    f.write_text('{"context": "c", "choices": ["a"], "answer_index": 0}\n')
    with pytest.raises(EvaluationError, match="1"):
        load_task(f)


# -- benchmark table --------------------------------------------------------------


TASKS = ["BoolQ", "PIQA", "HellaSwag", "WinoGrande", "ARC-e", "ARC-c", "OBQA"]


def results_for(model, scores):
    return [EvalResult(model, t, s) for t, s in zip(TASKS, scores)]


def test_round_half_away():
    assert round_half_away(58.25, 1) == 58.3
    assert round_half_away(-58.25, 1) == -58.3
    assert round_half_away(65.328, 1) == 65.3
    assert round_half_away(2.5, 0) == 3.0


def test_table_reproduces_published_averages():
    rows = {
        "GPT4All-J 6B v1.0": ([73.4, 74.8, 63.4, 64.7, 54.9, 36, 40.2], 58.2),
        "GPT4All 13B snoozy": ([83.3, 79.2, 75, 71.3, 60.9, 44.2, 43.4], 65.3),
    }
    results = []
    for model, (scores, _) in rows.items():
        results += results_for(model, scores)
    table, text, csv = report_table(results)
    for row in table.rows:
        assert row.average == rows[row.model][1]
    assert "58.2" in text and "65.3" in csv


def test_relative_column_92_5_percent():
    results = results_for("Nous-Hermes2", [83.9, 80.7, 80.1, 71.3, 75.7, 52.1, 46.2])
    results += results_for("text-davinci-003", [88.1, 83.8, 83.4, 75.8, 83.9, 63.9, 51.0])
    table, text, _ = report_table(results, reference_model="text-davinci-003")
    by_model = {r.model: r for r in table.rows}
    assert by_model["Nous-Hermes2"].average == 70.0
    assert by_model["text-davinci-003"].average == 75.7
    assert by_model["Nous-Hermes2"].relative_pct == 92.5
    assert by_model["Nous-Hermes2"].relative_pct > 92.0


def test_table_bolds_column_maxima():
    results = results_for("small", [10.0] * 7) + results_for("big", [90.0] * 7)
    _, text, _ = report_table(results)
    assert "*90.0*" in text
    assert "*10.0*" not in text


def test_ragged_grid_rejected():
    results = results_for("full", [1, 2, 3, 4, 5, 6, 7])
    results.append(EvalResult("partial", "BoolQ", 50.0))
    with pytest.raises(EvaluationError, match="partial"):
        report_table(results)


def test_unknown_reference_rejected():
    results = results_for("only", [1, 2, 3, 4, 5, 6, 7])
    with pytest.raises(EvaluationError, match="reference"):
        report_table(results, reference_model="ghost")


def test_results_io_roundtrip(tmp_path):
    results = results_for("m", [50.0, 60.0, 70.0, 80.0, 90.0, 10.0, 20.0])
    path = tmp_path / "results.ndjson"
    write_results(results, path)
    again = read_results(path)
    assert [(r.model, r.task, r.accuracy) for r in again] == [
        (r.model, r.task, r.accuracy) for r in results
    ]
