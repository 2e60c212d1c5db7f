from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from railcom.evaluation import (
    JUDGE_INSTRUCTION,
    METRICS,
    EvaluationError,
    JudgeParseError,
    JudgeScores,
    QaRecord,
    QaValidationError,
    QuestionRecord,
    RunReport,
    aggregate_scores,
    build_generation_prompt,
    build_judge_prompt,
    cq_accuracy,
    parse_judge_scores,
    system_tps,
    validate_qa_record,
)
from railcom.prompting import CoTResponse

PRED = CoTResponse("sees a person", "person on track", "brake", "Emergency stop.")


def _ratings(**over):
    d = {m: 8 for m in METRICS}
    d.update(over)
    return d


def test_judge_prompt_contents(qa_example):
    ref = validate_qa_record(qa_example)
    b = build_judge_prompt(PRED, ref, scenario_id="s")
    text = b.system_text + "\n" + b.user_text()
    assert JUDGE_INSTRUCTION in b.system_text
    rubric = b.text_of("rubric")[0]
    for m in METRICS:
        assert rubric.count(f" {m} (") == 1
    assert b.text_of("question") == ["Question:\nA critical, scenario-specific question..."]
    assert "Final Answer: Emergency stop." in text
    assert b.mode == "judge" and b.scenario_id == "s"


def test_judge_prompt_empty_reference():
    with pytest.raises(EvaluationError):
        build_judge_prompt(PRED, "   ")


def test_parse_judge_scores():
    s = parse_judge_scores(json.dumps(_ratings()))
    assert s == JudgeScores.uniform(8)
    fenced = "Here you go:\n```json\n" + json.dumps(_ratings(relevance=3)) + "\n```"
    assert parse_judge_scores(fenced).relevance == 3


def test_parse_judge_missing_key_named():
    d = _ratings()
    del d["physics_momentum"]
    with pytest.raises(JudgeParseError, match="physics_momentum"):
        parse_judge_scores(json.dumps(d))


@pytest.mark.parametrize("bad", [11, 0, -3, 7.5, "9", True])
def test_parse_judge_rejects_out_of_range(bad):
    with pytest.raises(JudgeParseError):
        parse_judge_scores(json.dumps(_ratings(hallucination=bad)))


def test_parse_judge_no_json():
    with pytest.raises(JudgeParseError):
        parse_judge_scores("all good, 10/10")


def test_aggregate_examples():
    assert aggregate_scores([JudgeScores.uniform(10)])[1] == 100.0
    assert aggregate_scores([JudgeScores.uniform(1)])[1] == 10.0
    dims, overall = aggregate_scores([JudgeScores(**{**JudgeScores.uniform(10).as_dict(), "relevance": 7})])
    assert overall == 97.5 and dims["relevance"] == 70.0
    with pytest.raises(EvaluationError):
        aggregate_scores([])


def test_aggregate_inversion():
    s = JudgeScores(**_ratings(hallucination=2, missing_step=1, missing_details=3))
    dims, _ = aggregate_scores([s], invert_penalty=True)
    assert (dims["hallucination"], dims["missing_step"], dims["missing_details"]) == (90.0, 100.0, 80.0)
    assert dims["relevance"] == 80.0


@given(st.lists(st.lists(st.integers(1, 10), min_size=12, max_size=12), min_size=1, max_size=20))
def test_aggregate_matches_hand_computation(rows):
    scores = [JudgeScores(**dict(zip(METRICS, r))) for r in rows]
    dims, overall = aggregate_scores(scores)
    for j, m in enumerate(METRICS):
        assert dims[m] == pytest.approx(10 * sum(r[j] for r in rows) / len(rows), rel=1e-12)
    assert overall == pytest.approx(10 * sum(map(sum, rows)) / (12 * len(rows)), rel=1e-9)
    assert 10.0 <= overall <= 100.0


def test_cq_accuracy_and_tps():
    assert cq_accuracy(["A", None, "C", "D"], ["A", "B", "C", "A"]) == 50.0
    with pytest.raises(EvaluationError):
        cq_accuracy([], [])
    with pytest.raises(EvaluationError):
        cq_accuracy(["A"], ["A", "B"])
    assert system_tps(120, 1000) == 120.0
    assert system_tps(57, 3000) == 19.0
    with pytest.raises(EvaluationError):
        system_tps(1, 0)


def test_generation_prompt():
    b = build_generation_prompt("img.jpg", "g1")
    assert b.image_parts()[0].ref == "img.jpg"
    instr = b.text_of("instruction")[0]
    assert instr.startswith("Analyze the provided train cab-view image.")
    assert '"mc_correct"' in instr
    assert b.system_text.startswith("You are a Senior Railway Operation Expert")
    with pytest.raises(EvaluationError):
        build_generation_prompt("")


def test_qa_example_validates(qa_example):
    rec = validate_qa_record(json.dumps(qa_example))
    assert isinstance(rec, QaRecord) and rec.mc_correct == "A"
    assert validate_qa_record("```json\n" + json.dumps(qa_example) + "\n```") == rec
    assert rec.to_dict() == qa_example


@pytest.mark.parametrize(
    "field",
    ["cot_perception", "cot_reasoning", "cot_planning", "qa_question", "qa_answer", "mc_question", "mc_options", "mc_correct"],
)
def test_qa_missing_field(qa_example, field):
    del qa_example[field]
    with pytest.raises(QaValidationError) as ei:
        validate_qa_record(qa_example)
    assert f"missing field {field}" in ei.value.violations


def test_qa_empty_field(qa_example):
    qa_example["qa_answer"] = "  "
    with pytest.raises(QaValidationError) as ei:
        validate_qa_record(qa_example)
    assert ei.value.violations == ["empty field qa_answer"]


def test_qa_options(qa_example):
    qa_example["mc_options"] = {"A": "only"}
    with pytest.raises(QaValidationError) as ei:
        validate_qa_record(qa_example)
    assert ei.value.violations == ["fewer than 2 options"]
    qa_example["mc_options"] = {"A": "x", "B": "y"}
    qa_example["mc_correct"] = "C"
    with pytest.raises(QaValidationError) as ei:
        validate_qa_record(qa_example)
    assert ei.value.violations == ["mc_correct not in mc_options"]


def test_qa_invalid_json():
    with pytest.raises(QaValidationError) as ei:
        validate_qa_record('{"cot_perception": "x", ')
    assert ei.value.violations == ["invalid JSON"]


def test_qa_collects_all_violations(qa_example):
    del qa_example["qa_question"]
    qa_example["mc_question"] = ""
    with pytest.raises(QaValidationError) as ei:
        validate_qa_record(qa_example)
    assert ei.value.violations == ["missing field qa_question", "empty field mc_question"]


def test_run_report_round_trip():
    rep = RunReport(
        "s1",
        [
            QuestionRecord("q1", "dynamic", True, 120, 1000, [2, 7, 10], 3, 18.0, PRED, None, "A", "A", judge=JudgeScores.uniform(9)),
            QuestionRecord("q2", "static", False, 30, 500, parse_error="missing section(s): Planning", gold="B", estimated_tokens=True),
        ],
        middleware_ms=12,
        generated_at="2026-01-01T00:00:00Z",
    )
    d = json.loads(rep.to_json())
    assert d["questions"][0]["keyframes"] == [2, 7, 10] and "keyframes" not in d["questions"][1]
    t = d["totals"]
    assert t["tokens"] == 150 and t["latency_ms"] == 1512
    assert t["stps"] == pytest.approx(150 / 1.512)
    assert t["cq_acc"] == 50.0 and t["overall"] == 90.0 and t["judged"] == 1
    back = RunReport.from_dict(d)
    assert back.to_dict() == d


def test_totals_without_mc_or_judge():
    t = RunReport("s", [QuestionRecord("q", "dynamic", False, 0, 0)]).totals()
    assert t["cq_acc"] is None and t["overall"] is None and t["stps"] == 0.0
