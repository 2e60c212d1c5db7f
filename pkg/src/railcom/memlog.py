"""Textual event log handed to the large model.

Line grammar::

    Frame {a}[ to Frame {b}]: item[ | item ...]

    visible: {class} (ID:{id}) at [{x1},{y1},{x2},{y2}] Motion: {label}
    lost:    {class} (ID:{id}) [Occluded/Lost] predicted at approx [{cx}, {cy}]
    empty:   No objects.

Visible items come first, then lost items, each group in ascending id.
Coordinates are rounded half-up to integers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Union

from .motion import KinematicState, MotionAnnotatedScenario, MotionConfig, dynamic_threshold
from .tracker import LOST, LostTrack, Track

NO_OBJECTS = "No objects."
STATIONARY = "stationary"
LABELS = ("stationary", "moving left", "moving right", "moving up", "moving down", "approaching", "receding")


class LogParseError(ValueError):
    pass


@dataclass(frozen=True)
class VisibleItem:
    class_name: str
    track_id: int
    box: tuple[int, int, int, int]
    label: str

    def render(self) -> str:
        x1, y1, x2, y2 = self.box
        return f"{self.class_name} (ID:{self.track_id}) at [{x1},{y1},{x2},{y2}] Motion: {self.label}"


@dataclass(frozen=True)
class LostItem:
    class_name: str
    track_id: int
    predicted: tuple[int, int]

    def render(self) -> str:
        cx, cy = self.predicted
        return f"{self.class_name} (ID:{self.track_id}) [Occluded/Lost] predicted at approx [{cx}, {cy}]"


Item = Union[VisibleItem, LostItem]


@dataclass(frozen=True)
class LogEntry:
    start: int
    end: int
    items: tuple[Item, ...] = ()
    frame_count: int | None = None

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError(f"entry range {self.start}..{self.end} is reversed")

    @property
    def is_empty(self) -> bool:
        return not self.items

    @property
    def n_frames(self) -> int:
        return self.frame_count if self.frame_count is not None else self.end - self.start + 1

    def body(self) -> str:
        if not self.items:
            return NO_OBJECTS
        return " | ".join(item.render() for item in self.items)

    def render(self) -> str:
        head = f"Frame {self.start}" if self.start == self.end else f"Frame {self.start} to Frame {self.end}"
        return f"{head}: {self.body()}"


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def direction_label(
    v: tuple[float, float],
    rho: float,
    state: KinematicState | str,
    cfg: MotionConfig,
    width: float | None = None,
) -> str:
    """Quantize a motion sample to a short label.

    The speed reference is the width-dependent threshold when ``width`` is
    given, otherwise the noise floor ``tau_min``.
    """
    if KinematicState(state) is KinematicState.STATIC:
        return STATIONARY
    ref = dynamic_threshold(width, cfg) if width is not None else cfg.tau_min
    vx, vy = v
    if math.hypot(vx, vy) >= ref:
        if abs(vx) >= abs(vy):
            return "moving left" if vx < 0 else "moving right"
        return "moving up" if vy < 0 else "moving down"
    return "approaching" if rho > 0 else "receding"


def predict_lost_position(track: Track | LostTrack, frame_index: int) -> tuple[float, float]:
    if track.status != LOST:
        raise ValueError(f"track {track.track_id} is not lost")
    gap = frame_index - track.last_seen_frame
    if gap < 1:
        raise ValueError("prediction needs frame_index after the last sighting")
    vx, vy = track.last_velocity or (0.0, 0.0)
    cx, cy = track.last_center
    return (cx + vx * gap, cy + vy * gap)


def frame_entries(mas: MotionAnnotatedScenario) -> list[LogEntry]:
    """One uncoalesced entry per frame."""
    cfg = mas.config
    entries = []
    for tf in mas.tracked.frames:
        t = tf.frame.frame_index
        visible: list[Item] = []
        for d in tf.frame.detections:
            if d.track_id is None:
                continue
            smp = mas.samples[(d.track_id, t)]
            label = direction_label(smp.velocity, smp.area_rate, smp.state, cfg, smp.width)
            box = tuple(round_half_up(c) for c in d.box)
            visible.append(VisibleItem(d.class_name, d.track_id, box, label))
        visible.sort(key=lambda it: it.track_id)
        lost: list[Item] = []
        for lt in sorted(tf.lost, key=lambda x: x.track_id):
            px, py = predict_lost_position(lt, t)
            lost.append(LostItem(lt.class_name, lt.track_id, (round_half_up(px), round_half_up(py))))
        entries.append(LogEntry(t, t, tuple(visible + lost)))
    return entries


def coalesce_entries(entries: Iterable[LogEntry]) -> list[LogEntry]:
    out: list[LogEntry] = []
    for e in entries:
        if out and out[-1].body() == e.body():
            prev = out[-1]
            out[-1] = LogEntry(prev.start, e.end, prev.items, prev.n_frames + e.n_frames)
        else:
            out.append(e)
    return out


def log_entries(mas: MotionAnnotatedScenario, coalesce: bool = False) -> list[LogEntry]:
    entries = frame_entries(mas)
    return coalesce_entries(entries) if coalesce else entries


def render_event_log(mas: MotionAnnotatedScenario, coalesce: bool = False) -> str:
    return "\n".join(e.render() for e in log_entries(mas, coalesce))


# --------------------------------------------------------------- parsing

_HEAD = re.compile(r"^Frame (\d+)(?: to Frame (\d+))?: (.*)$")
_VISIBLE = re.compile(
    r"^(?P<cls>.+?) \(ID:(?P<id>\d+)\) at \[(?P<x1>-?\d+),(?P<y1>-?\d+),(?P<x2>-?\d+),(?P<y2>-?\d+)\] "
    r"Motion: (?P<label>.+)$"
)
_LOST = re.compile(
    r"^(?P<cls>.+?) \(ID:(?P<id>\d+)\) \[Occluded/Lost\] predicted at approx \[(?P<cx>-?\d+), (?P<cy>-?\d+)\]$"
)


def parse_log_line(line: str) -> LogEntry:
    m = _HEAD.match(line.rstrip("\n"))
    if not m:
        raise LogParseError(f"not a log line: {line!r}")
    start = int(m.group(1))
    end = int(m.group(2)) if m.group(2) else start
    if start > end:
        raise LogParseError(f"reversed range in {line!r}")
    body = m.group(3)
    if body == NO_OBJECTS:
        return LogEntry(start, end)
    items: list[Item] = []
    for chunk in body.split(" | "):
        mv = _VISIBLE.match(chunk)
        if mv:
            box = tuple(int(mv.group(k)) for k in ("x1", "y1", "x2", "y2"))
            items.append(VisibleItem(mv.group("cls"), int(mv.group("id")), box, mv.group("label")))
            continue
        ml = _LOST.match(chunk)
        if ml:
            items.append(LostItem(ml.group("cls"), int(ml.group("id")), (int(ml.group("cx")), int(ml.group("cy")))))
            continue
        raise LogParseError(f"unrecognized item {chunk!r}")
    return LogEntry(start, end, tuple(items))


def parse_event_log(text: str) -> list[LogEntry]:
    return [parse_log_line(line) for line in text.splitlines() if line.strip()]


def expand_entries(entries: Iterable[LogEntry]) -> list[LogEntry]:
    """Undo coalescing, assuming consecutive frame numbers inside a range."""
    out = []
    for e in entries:
        for t in range(e.start, e.end + 1):
            out.append(LogEntry(t, t, e.items))
    return out
