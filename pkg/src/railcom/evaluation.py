"""Rubric judging, score aggregation, throughput and QA-record tooling."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Sequence

from .prompting import CoTResponse, ImagePart, PromptBundle, TextPart

METRICS = (
    "faithfulness_step",
    "informativeness_step",
    "risk_assessment",
    "signal_rule_adherence",
    "object_understanding",
    "repetition_token",
    "hallucination",
    "semantic_coverage",
    "physics_momentum",
    "missing_step",
    "relevance",
    "missing_details",
)
PENALTY_METRICS = ("hallucination", "missing_step", "missing_details")

# (key, name, evaluation focus, excellent, poor)
RUBRIC: tuple[tuple[str, str, str, str, str], ...] = (
    ("faithfulness_step", "Faithfulness-Step",
     "Alignment with Ground Truth and Standard Operating Procedures (SOPs).",
     "All steps correctly match reference SOPs.",
     "Majority of steps contradict ground truth."),
    ("informativeness_step", "Informativeness-Step",
     "Completeness of reasoning regarding train status and environment.",
     "Captures all critical info (Signals, Switches).",
     "Poor extraction of relevant reasoning."),
    ("risk_assessment", "Operational Risk Assess.",
     "Prioritization of high-risk hazards (distinguishing safe surroundings vs. intrusions).",
     "Prioritizes Emergency Braking for intrusions.",
     "Misses obvious obstructions or critical signals."),
    ("signal_rule_adherence", "Signal & Rule Adhere.",
     "Compliance with Railway General Operating Rules and Signal Systems.",
     "Fully compliant with signal aspects.",
     "Promotes highly unsafe behavior (e.g., SPAD)."),
    ("object_understanding", "Object Understanding",
     "Interpretation of railway assets and spatial location of dynamic objects.",
     "Correctly distinguishes safe objects from intruders.",
     "Misidentifies or ignores key objects."),
    ("repetition_token", "Repetition-Token",
     "Identification of unnecessary redundancy in the generated reasoning.",
     "No redundancy, concise technical description.",
     "Excessive redundancy, making reasoning unclear."),
    ("hallucination", "Hallucination",
     "Detection of irrelevant or invented reasoning steps not aligned with visual facts.",
     "No hallucinations; grounded in the rail domain.",
     "Majority of reasoning is hallucinated."),
    ("semantic_coverage", "Semantic Coverage",
     "Extent to which the response covers critical elements defined in the Ground Truth.",
     "Nearly complete semantic coverage.",
     "Very poor semantic coverage with major gaps."),
    ("physics_momentum", "Physics & Momentum",
     "Understanding of train kinematics, 1-degree of freedom, and braking inertia.",
     "Acknowledges long braking distances and horn use.",
     "Suggests “Steering” or “Swerving” to avoid obstacles."),
    ("missing_step", "Missing Step",
     "Evaluation of whether any necessary logical reasoning steps are omitted.",
     "No critical steps missing.",
     "Response is highly incomplete with critical gaps."),
    ("relevance", "Relevance",
     "Specificity to the scenario and correct use of railway terminology.",
     "Highly specific (e.g., uses “Ballast”, “Pantograph”).",
     "Largely irrelevant or uses generic driving terms."),
    ("missing_details", "Missing Details",
     "The extent to which critical contextual information is absent.",
     "No significant details are missing.",
     "Response is highly lacking in necessary details."),
)

JUDGE_INSTRUCTION = (
    "Avoid subjective interpretation and adhere to the given thresholds. "
    "Do not add any additional explanations beyond the structured JSON output."
)
JUDGE_PERSONA = (
    "You are an expert evaluator of railway cab-view safety reasoning. "
    "Compare the model response against the reference and rate it on each metric from 1 to 10, "
    "where Excellent corresponds to 9-10 and Poor to 1-2."
)

GENERATION_PERSONA = (
    "You are a Senior Railway Operation Expert and Instructor. Your task is to analyze images from the "
    "cab view and generate professional question-answering data for an automatic train operation system."
)
GENERATION_INSTRUCTION = """Analyze the provided train cab-view image. Generate one Question-Answer (QA) pair and one Choice Question (CQ).

Strictly output valid JSON with no Markdown formatting (do not use json). Use the following structure:
{
  "cot_perception": "Visual analysis: Identify signals (aspect/color)...",
  "cot_reasoning": "Logical analysis: Interpret the visual data based...",
  "cot_planning": "Action plan: Determine the immediate driving...",
  "qa_question": "A critical, scenario-specific question...",
  "qa_answer": "A detailed answer based on the analysis.",
  "mc_question": "A multiple-choice question focusing on specific...",
  "mc_options": {
    "A": "Option text",
    "B": "Option text", ...
  },
  "mc_correct": "The correct option letter (e.g., 'A')"
}"""

QA_TEXT_FIELDS = ("cot_perception", "cot_reasoning", "cot_planning", "qa_question", "qa_answer", "mc_question")


class JudgeParseError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


class QaValidationError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class JudgeScores:
    faithfulness_step: int
    informativeness_step: int
    risk_assessment: int
    signal_rule_adherence: int
    object_understanding: int
    repetition_token: int
    hallucination: int
    semantic_coverage: int
    physics_momentum: int
    missing_step: int
    relevance: int
    missing_details: int

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 10:
                raise JudgeParseError(f"{f.name} rating {v!r} outside integer range 1-10")

    def as_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def uniform(cls, rating: int) -> "JudgeScores":
        return cls(**{m: rating for m in METRICS})


# ------------------------------------------------------------------ judge


def rubric_block(rubric: Sequence[tuple[str, str, str, str, str]] = RUBRIC) -> str:
    lines = ["Scoring rubric (score range: 1-10; Excellent = 9-10, Poor = 1-2):"]
    for i, (key, name, focus, good, bad) in enumerate(rubric, start=1):
        lines.append(f"{i}. {key} ({name}): {focus} Excellent: {good} Poor: {bad}")
    return "\n".join(lines)


def render_cot(r: CoTResponse) -> str:
    return (
        f"Perceiving: {r.perceiving}\nReasoning: {r.reasoning}\n"
        f"Planning: {r.planning}\nFinal Answer: {r.final_answer}"
    )


@dataclass(frozen=True)
class QaRecord:
    cot_perception: str
    cot_reasoning: str
    cot_planning: str
    qa_question: str
    qa_answer: str
    mc_question: str
    mc_options: Mapping[str, str]
    mc_correct: str

    def reference_text(self) -> str:
        return (
            f"Perceiving: {self.cot_perception}\nReasoning: {self.cot_reasoning}\n"
            f"Planning: {self.cot_planning}\nFinal Answer: {self.qa_answer}"
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mc_options"] = dict(self.mc_options)
        return d


def build_judge_prompt(
    prediction: CoTResponse,
    reference: QaRecord | str,
    rubric: Sequence[tuple[str, str, str, str, str]] = RUBRIC,
    *,
    question: str | None = None,
    scenario_id: str = "",
) -> PromptBundle:
    ref = reference.reference_text() if isinstance(reference, QaRecord) else reference
    if not ref or not ref.strip():
        raise EvaluationError("reference answer is empty")
    if question is None and isinstance(reference, QaRecord):
        question = reference.qa_question
    keys = [r[0] for r in rubric]
    parts = [TextPart(rubric_block(rubric), "rubric")]
    if question:
        parts.append(TextPart(f"Question:\n{question}", "question"))
    parts += [
        TextPart(f"Reference:\n{ref.strip()}", "reference"),
        TextPart(f"Model Response:\n{render_cot(prediction)}", "prediction"),
        TextPart(
            "Output a single flat JSON object with exactly these keys, each an integer from 1 to 10: "
            + ", ".join(keys) + ".",
            "instruction",
        ),
    ]
    system = f"{JUDGE_PERSONA}\n{JUDGE_INSTRUCTION}"
    return PromptBundle(system, tuple(parts), question or "", "judge", False, scenario_id)


_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n?|```")


def first_json_object(text: str) -> dict[str, Any] | None:
    """First decodable JSON object in ``text``; code fences and prose are skipped."""
    cleaned = _FENCE.sub("", text)
    dec = json.JSONDecoder()
    for m in re.finditer(r"\{", cleaned):
        try:
            obj, _ = dec.raw_decode(cleaned, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def parse_judge_scores(text: str) -> JudgeScores:
    obj = first_json_object(text if isinstance(text, str) else "")
    if obj is None:
        raise JudgeParseError("no JSON object found")
    for key in METRICS:
        if key not in obj:
            raise JudgeParseError(f"missing key {key}")
    for key in METRICS:
        v = obj[key]
        if isinstance(v, bool) or not isinstance(v, int):
            raise JudgeParseError(f"{key} value {v!r} is not an integer")
        if not 1 <= v <= 10:
            raise JudgeParseError(f"{key} value {v} outside range 1-10")
    return JudgeScores(**{k: obj[k] for k in METRICS})


def aggregate_scores(
    per_sample: Sequence[JudgeScores], invert_penalty: bool = False
) -> tuple[dict[str, float], float]:
    """Per-dimension means on a 0-100 scale and their unweighted mean.

    ``invert_penalty`` maps hallucination, missing_step and missing_details
    through ``11 - rating`` for judges that rate them penalty-style.
    """
    if not per_sample:
        raise EvaluationError("no judge scores to aggregate")
    n = len(per_sample)
    dims: dict[str, float] = {}
    for key in METRICS:
        vals = [getattr(s, key) for s in per_sample]
        if invert_penalty and key in PENALTY_METRICS:
            vals = [11 - v for v in vals]
        dims[key] = sum(vals) * 10.0 / n
    overall = sum(dims.values()) / len(dims)
    return dims, overall


def cq_accuracy(predictions: Sequence[str | None], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise EvaluationError(f"{len(predictions)} predictions vs {len(golds)} gold letters")
    if not golds:
        raise EvaluationError("no multiple-choice items")
    hits = sum(1 for p, g in zip(predictions, golds) if p is not None and p == g)
    return 100.0 * hits / len(golds)


def system_tps(total_completion_tokens: int, total_latency_ms: float) -> float:
    if not total_latency_ms > 0:
        raise EvaluationError("total latency must be positive")
    return total_completion_tokens / (total_latency_ms / 1000.0)


# ------------------------------------------------------------ QA records


def build_generation_prompt(image_ref: str, scenario_id: str = "") -> PromptBundle:
    if not image_ref:
        raise EvaluationError("QA generation needs an image reference")
    parts = (ImagePart(image_ref, "Image", 1), TextPart(GENERATION_INSTRUCTION, "instruction"))
    return PromptBundle(GENERATION_PERSONA, parts, "", "generation", False, scenario_id)


def validate_qa_record(text: str | Mapping[str, Any]) -> QaRecord:
    """Parse and check a generated QA record, collecting every violation.

    Markdown fences around the JSON are stripped before parsing.
    """
    if isinstance(text, Mapping):
        obj: Any = dict(text)
    else:
        stripped = _FENCE.sub("", text).strip()
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError:
            obj = first_json_object(text)
            if obj is None:
                raise QaValidationError(["invalid JSON"]) from None
    if not isinstance(obj, dict):
        raise QaValidationError(["record is not a JSON object"])
    bad: list[str] = []
    for name in QA_TEXT_FIELDS:
        if name not in obj:
            bad.append(f"missing field {name}")
        elif not isinstance(obj[name], str):
            bad.append(f"field {name} is not a string")
        elif not obj[name].strip():
            bad.append(f"empty field {name}")
    options = obj.get("mc_options")
    if "mc_options" not in obj:
        bad.append("missing field mc_options")
        options = None
    elif not isinstance(options, dict):
        bad.append("field mc_options is not an object")
        options = None
    else:
        if len(options) < 2:
            bad.append("fewer than 2 options")
        for k, v in options.items():
            if not (len(k) == 1 and "A" <= k <= "Z"):
                bad.append(f"option key {k!r} is not an uppercase letter")
            if not isinstance(v, str) or not v.strip():
                bad.append(f"empty option {k}")
    correct = obj.get("mc_correct")
    if "mc_correct" not in obj:
        bad.append("missing field mc_correct")
    elif not isinstance(correct, str) or not correct.strip():
        bad.append("empty field mc_correct")
    elif options is not None and correct not in options:
        bad.append("mc_correct not in mc_options")
    if bad:
        raise QaValidationError(bad)
    return QaRecord(**{k: obj[k] for k in QA_TEXT_FIELDS}, mc_options=dict(options), mc_correct=correct)


# --------------------------------------------------------------- reports


@dataclass
class QuestionRecord:
    question: str
    mode: str
    defensive: bool
    tokens: int
    latency_ms: int
    keyframes: list[int] | None = None
    K: int | None = None
    S: float | None = None
    cot: CoTResponse | None = None
    parse_error: str | None = None
    choice: str | None = None
    gold: str | None = None
    estimated_tokens: bool = False
    attempts: int = 1
    judge: JudgeScores | None = None
    judge_error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"q": self.question, "mode": self.mode}
        if self.keyframes is not None:
            out["keyframes"] = list(self.keyframes)
            out["K"] = self.K
            out["S"] = self.S
        out["defensive"] = self.defensive
        out["cot"] = self.cot.to_dict() if self.cot else None
        if self.parse_error:
            out["parse_error"] = self.parse_error
        out["choice"] = self.choice
        out["gold"] = self.gold
        out["tokens"] = self.tokens
        out["latency_ms"] = self.latency_ms
        if self.estimated_tokens:
            out["estimated"] = True
        if self.judge is not None:
            out["judge"] = self.judge.as_dict()
        if self.judge_error:
            out["judge_error"] = self.judge_error
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QuestionRecord":
        cot = None
        if d.get("cot"):
            c = d["cot"]
            cot = CoTResponse(c["perceiving"], c["reasoning"], c["planning"], c["final"], d.get("choice"))
        return cls(
            question=d["q"],
            mode=d.get("mode", "dynamic"),
            defensive=bool(d.get("defensive", False)),
            tokens=int(d["tokens"]),
            latency_ms=int(d["latency_ms"]),
            keyframes=d.get("keyframes"),
            K=d.get("K"),
            S=d.get("S"),
            cot=cot,
            parse_error=d.get("parse_error"),
            choice=d.get("choice"),
            gold=d.get("gold"),
            estimated_tokens=bool(d.get("estimated", False)),
            judge=JudgeScores(**d["judge"]) if d.get("judge") else None,
            judge_error=d.get("judge_error"),
        )


@dataclass
class RunReport:
    scenario: str
    questions: list[QuestionRecord] = field(default_factory=list)
    middleware_ms: int = 0
    generated_at: str | None = None
    invert_penalty: bool = False

    @property
    def total_tokens(self) -> int:
        return sum(q.tokens for q in self.questions)

    @property
    def total_latency_ms(self) -> int:
        return sum(q.latency_ms for q in self.questions) + self.middleware_ms

    def totals(self) -> dict[str, Any]:
        lat = self.total_latency_ms
        mc = [q for q in self.questions if q.gold is not None]
        judged = [q.judge for q in self.questions if q.judge is not None]
        out: dict[str, Any] = {
            "tokens": self.total_tokens,
            "latency_ms": lat,
            "middleware_ms": self.middleware_ms,
            "stps": system_tps(self.total_tokens, lat) if lat > 0 else 0.0,
            "cq_acc": cq_accuracy([q.choice for q in mc], [q.gold for q in mc]) if mc else None,
            "overall": None,
            "dims": None,
            "judged": len(judged),
            "mc_items": len(mc),
            "inverted": self.invert_penalty,
        }
        if judged:
            dims, overall = aggregate_scores(judged, self.invert_penalty)
            out["overall"] = overall
            out["dims"] = dims
        return out

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"scenario": self.scenario}
        if self.generated_at is not None:
            out["generated_at"] = self.generated_at
        out["questions"] = [q.to_dict() for q in self.questions]
        out["totals"] = self.totals()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunReport":
        totals = d.get("totals", {})
        return cls(
            scenario=d["scenario"],
            questions=[QuestionRecord.from_dict(q) for q in d.get("questions", [])],
            middleware_ms=int(totals.get("middleware_ms", 0)),
            generated_at=d.get("generated_at"),
            invert_penalty=bool(totals.get("inverted", False)),
        )
