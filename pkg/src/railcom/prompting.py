"""Prompt composition, the defensive fallback and chain-of-thought parsing."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence, Union

from .core import FrameRecord, Question
from .memlog import NO_OBJECTS, LogEntry, LogParseError, parse_event_log, round_half_up
from .sampler import SamplingPlan

TEMPLATE_NAMES = ("system_dynamic", "system_static", "defensive", "log_part", "annotation_part", "question_part")


class PromptError(ValueError):
    pass


class CoTParseError(ValueError):
    def __init__(self, missing: Sequence[str], raw: str, empty: Sequence[str] = ()):
        self.missing = list(missing)
        self.empty = list(empty)
        self.raw = raw
        parts = []
        if self.missing:
            parts.append("missing section(s): " + ", ".join(self.missing))
        if self.empty:
            parts.append("empty section(s): " + ", ".join(self.empty))
        super().__init__("; ".join(parts))


@dataclass(frozen=True)
class Templates:
    system_dynamic: str
    system_static: str
    defensive: str
    log_part: str
    annotation_part: str
    question_part: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "Templates":
        """Load templates, overriding package defaults with files found in ``directory``."""
        texts = {}
        base = resources.files("railcom") / "templates"
        for name in TEMPLATE_NAMES:
            path = Path(directory) / f"{name}.txt" if directory else None
            if path is not None and path.is_file():
                raw = path.read_text(encoding="utf-8")
            else:
                raw = (base / f"{name}.txt").read_text(encoding="utf-8")
            texts[name] = raw.rstrip("\n")
        return cls(**texts)


_DEFAULT_TEMPLATES: Templates | None = None


def default_templates() -> Templates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = Templates.load()
    return _DEFAULT_TEMPLATES


@dataclass(frozen=True)
class TextPart:
    text: str
    kind: str = "text"


@dataclass(frozen=True)
class ImagePart:
    ref: str | None
    label: str
    position: int

    @property
    def placeholder(self) -> str:
        return f"[{self.label}: image unavailable]"


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_parts: tuple[Part, ...]
    question_text: str
    mode: str
    defensive: bool = False
    scenario_id: str = ""

    def image_parts(self) -> list[ImagePart]:
        return [p for p in self.user_parts if isinstance(p, ImagePart)]

    def text_of(self, kind: str) -> list[str]:
        return [p.text for p in self.user_parts if isinstance(p, TextPart) and p.kind == kind]

    def user_text(self) -> str:
        """All text the user message carries, images shown as their labels."""
        out = []
        for p in self.user_parts:
            out.append(p.text if isinstance(p, TextPart) else p.label)
        return "\n\n".join(out)


def format_question(q: Question | str) -> str:
    if isinstance(q, str):
        return q
    if not q.options:
        return q.text
    lines = [q.text, "Options:"]
    lines += [f"{k}. {v}" for k, v in sorted(q.options.items())]
    return "\n".join(lines)


def defensive_trigger(entries: Sequence[LogEntry] | str) -> bool:
    """True when more than 80% of frames log ``No objects.``.

    Coalesced entries count once per frame they cover.
    """
    if isinstance(entries, str):
        entries = parse_event_log(entries)
    if not entries:
        raise PromptError("defensive trigger needs at least one log entry")
    total = sum(e.n_frames for e in entries)
    empty = sum(e.n_frames for e in entries if e.is_empty)
    # integer form of empty / total > 0.8
    return 5 * empty > 4 * total


def inject_defensive_block(b: PromptBundle, templates: Templates | None = None) -> PromptBundle:
    if b.defensive:
        raise PromptError("bundle already carries the defensive block")
    templates = templates or default_templates()
    parts = list(b.user_parts)
    log_at = [i for i, p in enumerate(parts) if isinstance(p, TextPart) and p.kind in ("log", "annotation")]
    at = log_at[-1] + 1 if log_at else len(parts)
    parts.insert(at, TextPart(templates.defensive, "defensive"))
    return replace(b, user_parts=tuple(parts), defensive=True)


def compose_dynamic_prompt(
    plan: SamplingPlan,
    log: str,
    question: Question | str,
    image_refs: Mapping[int, str | None] | Sequence[str | None] | None = None,
    *,
    defensive: bool = True,
    scenario_id: str = "",
    templates: Templates | None = None,
    log_entries: Sequence[LogEntry] | None = None,
) -> PromptBundle:
    """Keyframe images, then the perception log, then the question.

    ``image_refs`` is either aligned with ``plan.keyframes`` or maps frame
    position to an image reference. Missing images degrade to text
    placeholders. ``defensive=False`` disables the fallback block.
    """
    if not plan.keyframes:
        raise PromptError("sampling plan has no keyframes")
    templates = templates or default_templates()
    T = plan.T
    if image_refs is None:
        refs: dict[int, str | None] = {}
    elif isinstance(image_refs, Mapping):
        refs = dict(image_refs)
    else:
        if len(image_refs) != len(plan.keyframes):
            raise PromptError("image refs do not align with keyframes")
        refs = dict(zip(plan.keyframes, image_refs))
    parts: list[Part] = [ImagePart(refs.get(t), f"Seq: {t}/{T}", t) for t in sorted(plan.keyframes)]
    parts.append(TextPart(templates.log_part.format(T=T, log=log), "log"))
    q_text = format_question(question)
    parts.append(TextPart(templates.question_part.format(question=q_text), "question"))
    bundle = PromptBundle(templates.system_dynamic, tuple(parts), q_text, "dynamic", False, scenario_id)
    if defensive:
        if log_entries is None:
            try:
                log_entries = parse_event_log(log)
            except LogParseError as exc:
                raise PromptError(f"cannot evaluate defensive trigger: {exc}") from None
        if log_entries and defensive_trigger(log_entries):
            bundle = inject_defensive_block(bundle, templates)
    return bundle


def annotation_lines(detections: Sequence) -> list[str]:
    rows = sorted(
        enumerate(detections),
        key=lambda p: (p[1].track_id is None, p[1].track_id if p[1].track_id is not None else 0, p[0]),
    )
    next_free = max((d.track_id for d in detections if d.track_id is not None), default=0) + 1
    out = []
    for _, d in rows:
        if d.track_id is None:
            tid, next_free = next_free, next_free + 1
        else:
            tid = d.track_id
        x1, y1, x2, y2 = (round_half_up(c) for c in d.box)
        out.append(f"{d.class_name} (ID:{tid}) at [{x1},{y1},{x2},{y2}]")
    return out or [NO_OBJECTS]


def compose_static_prompt(
    frame: FrameRecord,
    detections: Sequence | None,
    question: Question | str,
    *,
    scenario_id: str = "",
    templates: Templates | None = None,
) -> PromptBundle:
    """Single image with a textual detection block in place of drawn boxes.

    Detections without an id are numbered after the identified ones in
    stream order.
    """
    templates = templates or default_templates()
    dets = frame.detections if detections is None else detections
    parts: list[Part] = []
    if frame.image_ref is not None:
        parts.append(ImagePart(frame.image_ref, "Seq: 1/1", 1))
    block = "\n".join(annotation_lines(dets))
    parts.append(TextPart(templates.annotation_part.format(detections=block), "annotation"))
    q_text = format_question(question)
    parts.append(TextPart(templates.question_part.format(question=q_text), "question"))
    return PromptBundle(templates.system_static, tuple(parts), q_text, "static", False, scenario_id)


# ------------------------------------------------------------ CoT parsing


@dataclass(frozen=True)
class CoTResponse:
    perceiving: str
    reasoning: str
    planning: str
    final_answer: str
    choice_letter: str | None = None

    def to_dict(self) -> dict[str, str]:
        return {
            "perceiving": self.perceiving,
            "reasoning": self.reasoning,
            "planning": self.planning,
            "final": self.final_answer,
        }


SECTION_NAMES = {
    "perceiving": "Perceiving",
    "reasoning": "Reasoning",
    "planning": "Planning",
    "final_answer": "Final Answer",
}

_HEADER = re.compile(
    r"^[ \t>#*_\-]*(?:\d+[.)][ \t]*)?[*_]*[ \t]*"
    r"(?P<name>perceiving|perception|reasoning|planning|final[ \t]+answer)"
    r"[ \t]*[*_]*[ \t]*(?::[*_]*|[ \t]*$)",
    re.IGNORECASE | re.MULTILINE,
)


def _section_key(name: str) -> str:
    name = " ".join(name.lower().split())
    if name in ("perceiving", "perception"):
        return "perceiving"
    if name == "final answer":
        return "final_answer"
    return name


def _clean(body: str) -> str:
    body = body.strip()
    body = re.sub(r"^[*_\s]+", "", body)
    body = re.sub(r"[*_\s]+$", "", body) if body.endswith(("*", "_")) else body
    return body.strip()


def parse_cot_response(text: str) -> CoTResponse:
    """Split a response into its four reasoning sections.

    Headers are matched at line start, case-insensitively, with optional
    markdown emphasis, heading marks or numbering, and end in a colon or
    the end of the line. The first occurrence of each header wins.
    """
    if not isinstance(text, str):
        raise CoTParseError(list(SECTION_NAMES.values()), repr(text))
    hits = []
    seen = set()
    for m in _HEADER.finditer(text):
        key = _section_key(m.group("name"))
        hits.append((m.start(), m.end(), key, key not in seen))
        seen.add(key)
    sections: dict[str, str] = {}
    for i, (_, end, key, first) in enumerate(hits):
        if not first:
            continue
        stop = hits[i + 1][0] if i + 1 < len(hits) else len(text)
        sections[key] = _clean(text[end:stop])
    missing = [label for key, label in SECTION_NAMES.items() if key not in sections]
    empty = [label for key, label in SECTION_NAMES.items() if key in sections and not sections[key]]
    if missing or empty:
        raise CoTParseError(missing, text, empty)
    return CoTResponse(sections["perceiving"], sections["reasoning"], sections["planning"], sections["final_answer"])


_EXPLICIT = re.compile(
    r"\b(?i:option|choice|answer\s+is|answer\s*:|answer\s+would\s+be)\s*[:\-]?\s*\(?([A-Z])(?![A-Za-z'])"
)
_PAREN = re.compile(r"\(([A-Z])\)")
_PUNCT = re.compile(r"(?<![A-Za-z])([A-Z])[).:](?![A-Za-z])")
_JOINED = re.compile(r"(?<![A-Za-z])([A-Z])(?:\s*,\s*|\s+(?:or|and|/)\s+|/)([A-Z])(?![A-Za-z])")
_ALONE = re.compile(r"^\s*\(?([A-Z])\)?[.!]?\s*$")


def _letters(text: str, allowed: set[str] | None) -> set[str]:
    found: set[str] = set()
    for m in _EXPLICIT.finditer(text):
        found.add(m.group(1))
    for rx in (_PAREN, _PUNCT, _ALONE):
        for m in rx.finditer(text):
            found.add(m.group(1))
    for m in _JOINED.finditer(text):
        found.update(m.groups())
    if allowed is not None:
        found &= allowed
    return found


def extract_choice(
    r: CoTResponse | str, options: Mapping[str, str] | Sequence[str] | None = None
) -> str | None:
    """Option letter stated in the answer, or None when absent or ambiguous.

    The final answer is scanned first; the whole text is a fallback only
    when the final answer names no letter at all.
    """
    allowed = set(options) if options else None
    if isinstance(r, CoTResponse):
        scopes = [r.final_answer, "\n".join(r.to_dict().values())]
    else:
        scopes = [r]
    for scope in scopes:
        found = _letters(scope, allowed)
        if len(found) == 1:
            return found.pop()
        if len(found) > 1:
            return None
    return None
