"""Shared domain types and detection-stream ingestion.

Two stream formats are supported. JSONL is canonical, one frame per line::

    {"frame": 1, "ts_ms": 0, "image": "f1.jpg",
     "detections": [{"x1": 40, "y1": 230, "x2": 112, "y2": 433,
                     "class": "person", "score": 0.9, "id": 4}]}

MOT CSV rows are ``frame,id,x,y,w,h,score,class`` with ``id = -1`` for
untracked detections. Plain MOT16 rows (no class column, or the 10-column
variant with world coordinates) are accepted and get class ``object``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, TextIO

DEFAULT_CLASS = "object"
FORMATS = ("jsonl", "mot_csv")


class StreamParseError(ValueError):
    """Raised when a detection stream cannot be parsed."""

    def __init__(self, reason: str, line: int | None = None, frame: int | None = None):
        self.reason = reason
        self.line = line
        self.frame = frame
        where = []
        if line is not None:
            where.append(f"line {line}")
        if frame is not None:
            where.append(f"frame {frame}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + reason)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    class_name: str
    score: float = 1.0
    track_id: int | None = None

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def with_id(self, track_id: int | None) -> "Detection":
        return replace(self, track_id=track_id)


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    detections: tuple[Detection, ...] = ()
    timestamp_ms: int | None = None
    image_ref: str | None = None


@dataclass(frozen=True)
class Question:
    text: str
    options: Mapping[str, str] | None = None
    gold: str | None = None

    @property
    def is_multiple_choice(self) -> bool:
        return bool(self.options)


@dataclass(frozen=True)
class Scenario:
    id: str
    frames: tuple[FrameRecord, ...]
    fps: float | None = None
    questions: tuple[Question, ...] = ()

    @property
    def T(self) -> int:
        return len(self.frames)

    def iter_detections(self) -> Iterable[tuple[FrameRecord, Detection]]:
        for fr in self.frames:
            for det in fr.detections:
                yield fr, det


@dataclass(frozen=True)
class Violation:
    location: str
    rule: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def rules(self) -> list[str]:
        return [v.rule for v in self.violations]


def validate_scenario(s: Scenario) -> ValidationReport:
    """Check every domain invariant; violations are returned, never raised."""
    out: list[Violation] = []
    if not s.frames:
        out.append(Violation("scenario", "empty scenario"))
    prev: int | None = None
    for pos, fr in enumerate(s.frames, start=1):
        loc = f"frame {fr.frame_index}"
        if fr.frame_index < 1:
            out.append(Violation(loc, "frame_index below 1"))
        if prev is not None and fr.frame_index <= prev:
            out.append(Violation(f"{loc} (position {pos})", "non-increasing frame_index"))
        prev = fr.frame_index
        if fr.timestamp_ms is not None and fr.timestamp_ms < 0:
            out.append(Violation(loc, "negative timestamp"))
        for j, d in enumerate(fr.detections):
            dloc = f"{loc} detection {j}"
            if d.x2 == d.x1:
                out.append(Violation(dloc, "zero-width box"))
            elif d.x2 < d.x1:
                out.append(Violation(dloc, "negative-width box"))
            if d.y2 == d.y1:
                out.append(Violation(dloc, "zero-height box"))
            elif d.y2 < d.y1:
                out.append(Violation(dloc, "negative-height box"))
            if not (0.0 <= d.score <= 1.0):
                out.append(Violation(dloc, "score out of range"))
            if d.track_id is not None and d.track_id < 0:
                out.append(Violation(dloc, "negative track_id"))
            if not d.class_name:
                out.append(Violation(dloc, "empty class"))
    if s.fps is not None and not s.fps > 0:
        out.append(Violation("scenario", "non-positive fps"))
    for qi, q in enumerate(s.questions):
        qloc = f"question {qi}"
        if q.options:
            for key in q.options:
                if not (len(key) == 1 and "A" <= key <= "Z"):
                    out.append(Violation(f"{qloc} option {key!r}", "option key not an uppercase letter"))
            if q.gold is not None and q.gold not in q.options:
                out.append(Violation(qloc, "gold not among options"))
        elif q.gold is not None:
            out.append(Violation(qloc, "gold without options"))
    return ValidationReport(tuple(out))


# ---------------------------------------------------------------- parsing


def _num(obj: Mapping[str, Any], key: str, line: int) -> float:
    if key not in obj:
        raise StreamParseError(f"detection missing {key!r}", line=line)
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise StreamParseError(f"{key!r} is not a number", line=line)
    if not math.isfinite(val):
        raise StreamParseError(f"{key!r} is not finite", line=line)
    return float(val)


def _check_box(det: Detection, frame: int, line: int) -> None:
    if det.x2 <= det.x1 or det.y2 <= det.y1:
        raise StreamParseError(
            f"degenerate box ({det.x1:g},{det.y1:g},{det.x2:g},{det.y2:g})",
            line=line,
            frame=frame,
        )
    if not 0.0 <= det.score <= 1.0:
        raise StreamParseError(f"score {det.score} outside [0,1]", line=line, frame=frame)


def _parse_jsonl_detection(obj: Any, line: int) -> Detection:
    if not isinstance(obj, dict):
        raise StreamParseError("detection is not an object", line=line)
    cls = obj.get("class", DEFAULT_CLASS)
    if not isinstance(cls, str) or not cls:
        raise StreamParseError("'class' must be a non-empty string", line=line)
    score = _num(obj, "score", line) if "score" in obj else 1.0
    tid = obj.get("id")
    if tid is not None and (isinstance(tid, bool) or not isinstance(tid, int) or tid < 0):
        raise StreamParseError("'id' must be a non-negative integer", line=line)
    return Detection(
        _num(obj, "x1", line), _num(obj, "y1", line), _num(obj, "x2", line), _num(obj, "y2", line),
        class_name=cls, score=score, track_id=tid,
    )


def _parse_jsonl(text: TextIO) -> list[FrameRecord]:
    frames: dict[int, FrameRecord] = {}
    for lineno, raw in enumerate(text, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise StreamParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
        if not isinstance(obj, dict):
            raise StreamParseError("line is not a JSON object", line=lineno)
        idx = obj.get("frame")
        if isinstance(idx, bool) or not isinstance(idx, int) or idx < 1:
            raise StreamParseError("'frame' must be an integer >= 1", line=lineno)
        if idx in frames:
            raise StreamParseError("duplicate frame_index", line=lineno, frame=idx)
        ts = obj.get("ts_ms")
        if ts is not None and (isinstance(ts, bool) or not isinstance(ts, int) or ts < 0):
            raise StreamParseError("'ts_ms' must be a non-negative integer", line=lineno)
        image = obj.get("image")
        if image is not None and not isinstance(image, str):
            raise StreamParseError("'image' must be a string", line=lineno)
        dets_raw = obj.get("detections", [])
        if not isinstance(dets_raw, list):
            raise StreamParseError("'detections' must be an array", line=lineno)
        dets = tuple(_parse_jsonl_detection(d, lineno) for d in dets_raw)
        for d in dets:
            _check_box(d, idx, lineno)
        frames[idx] = FrameRecord(idx, dets, timestamp_ms=ts, image_ref=image)
    return [frames[k] for k in sorted(frames)]


def _parse_mot(text: TextIO) -> list[FrameRecord]:
    rows: dict[int, list[Detection]] = {}
    for lineno, row in enumerate(csv.reader(text), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        row = [c.strip() for c in row]
        if len(row) not in (6, 7, 8, 10):
            raise StreamParseError(f"expected 6-8 or 10 columns, got {len(row)}", line=lineno)
        try:
            frame = int(row[0])
            tid = int(float(row[1]))
            x, y, w, h = (float(v) for v in row[2:6])
            score = float(row[6]) if len(row) >= 7 else 1.0
        except ValueError as exc:
            raise StreamParseError(f"non-numeric field ({exc})", line=lineno) from None
        if frame < 1:
            raise StreamParseError("frame must be >= 1", line=lineno)
        if tid < -1:
            raise StreamParseError("id must be -1 or non-negative", line=lineno)
        if not all(math.isfinite(v) for v in (x, y, w, h, score)):
            raise StreamParseError("non-finite value", line=lineno)
        cls = row[7] if len(row) == 8 and row[7] else DEFAULT_CLASS
        det = Detection(x, y, x + w, y + h, cls, score, None if tid == -1 else tid)
        _check_box(det, frame, lineno)
        rows.setdefault(frame, []).append(det)
    return [FrameRecord(k, tuple(rows[k])) for k in sorted(rows)]


def parse_detection_stream(
    source: str | TextIO,
    format: str = "jsonl",
    scenario_id: str = "stream",
    fps: float | None = None,
    questions: Iterable[Question] = (),
) -> Scenario:
    """Parse a detection stream into a :class:`Scenario`.

    ``source`` is either the stream text or an open text handle. Frames are
    returned sorted by ``frame_index``; detections keep their source order.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown stream format {format!r}")
    handle = io.StringIO(source) if isinstance(source, str) else source
    frames = _parse_jsonl(handle) if format == "jsonl" else _parse_mot(handle)
    if not frames:
        raise StreamParseError("stream contains no frames")
    return Scenario(scenario_id, tuple(frames), fps=fps, questions=tuple(questions))


def read_stream(path: str | Path, format: str | None = None, **kw: Any) -> Scenario:
    path = Path(path)
    if format is None:
        format = "mot_csv" if path.suffix.lower() in (".csv", ".txt") else "jsonl"
    kw.setdefault("scenario_id", path.stem)
    with path.open(encoding="utf-8") as fh:
        return parse_detection_stream(fh, format, **kw)


# ---------------------------------------------------------------- writing


def _coord(v: float) -> int | float:
    return int(v) if float(v).is_integer() else v


def detection_to_dict(d: Detection, extra: Mapping[str, Any] | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {
        "x1": _coord(d.x1), "y1": _coord(d.y1), "x2": _coord(d.x2), "y2": _coord(d.y2),
        "class": d.class_name, "score": d.score,
    }
    if d.track_id is not None:
        out["id"] = d.track_id
    if extra:
        out.update(extra)
    return out


def frame_to_dict(fr: FrameRecord, extras: list[Mapping[str, Any] | None] | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {"frame": fr.frame_index}
    if fr.timestamp_ms is not None:
        out["ts_ms"] = fr.timestamp_ms
    if fr.image_ref is not None:
        out["image"] = fr.image_ref
    out["detections"] = [
        detection_to_dict(d, extras[i] if extras else None) for i, d in enumerate(fr.detections)
    ]
    return out


def dump_jsonl(s: Scenario, extras: Mapping[tuple[int, int], Mapping[str, Any]] | None = None) -> str:
    """Serialize to canonical JSONL.

    ``extras`` maps (frame_index, detection position) to extension fields
    merged into that detection object.
    """
    lines = []
    for fr in s.frames:
        ext = None
        if extras:
            ext = [extras.get((fr.frame_index, i)) for i in range(len(fr.detections))]
        lines.append(json.dumps(frame_to_dict(fr, ext), separators=(",", ":")))
    return "\n".join(lines) + "\n"


def dump_mot(s: Scenario) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for fr in s.frames:
        for d in fr.detections:
            w.writerow([
                fr.frame_index,
                -1 if d.track_id is None else d.track_id,
                repr(d.x1), repr(d.y1), repr(d.width), repr(d.height),
                repr(d.score), d.class_name,
            ])
    return buf.getvalue()


# --------------------------------------------------------------- manifest


def _parse_question(obj: Any, i: int) -> Question:
    if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
        raise ManifestError(f"question {i}: needs a 'text' string")
    options = obj.get("options")
    if options is not None:
        if not isinstance(options, dict) or not all(isinstance(v, str) for v in options.values()):
            raise ManifestError(f"question {i}: 'options' must map letters to strings")
        options = dict(options)
    gold = obj.get("gold")
    if gold is not None and not isinstance(gold, str):
        raise ManifestError(f"question {i}: 'gold' must be a letter")
    return Question(obj["text"], options, gold)


def question_to_dict(q: Question) -> dict[str, Any]:
    out: dict[str, Any] = {"text": q.text}
    if q.options is not None:
        out["options"] = dict(q.options)
    if q.gold is not None:
        out["gold"] = q.gold
    return out


def load_manifest(path: str | Path) -> Scenario:
    """Load a scenario manifest; the stream path resolves relative to it."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ManifestError(f"{path}: manifest must be an object")
    for key in ("id", "stream"):
        if not isinstance(obj.get(key), str):
            raise ManifestError(f"{path}: missing {key!r}")
    fmt = obj.get("format", "jsonl")
    if fmt not in FORMATS:
        raise ManifestError(f"{path}: unknown format {fmt!r}")
    fps = obj.get("fps")
    if fps is not None and (isinstance(fps, bool) or not isinstance(fps, (int, float)) or fps <= 0):
        raise ManifestError(f"{path}: 'fps' must be positive")
    questions = [_parse_question(q, i) for i, q in enumerate(obj.get("questions", []))]
    stream = Path(obj["stream"])
    if not stream.is_absolute():
        stream = path.parent / stream
    scenario = read_stream(stream, fmt, scenario_id=obj["id"], fps=fps, questions=questions)
    return scenario


def write_manifest(s: Scenario, path: str | Path, stream: str, format: str = "jsonl") -> None:
    obj: dict[str, Any] = {"id": s.id}
    if s.fps is not None:
        obj["fps"] = s.fps
    obj["stream"] = stream
    obj["format"] = format
    obj["questions"] = [question_to_dict(q) for q in s.questions]
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
