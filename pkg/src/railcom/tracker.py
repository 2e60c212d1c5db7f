"""Two-stage greedy IoU tracker with spatio-temporal identity recovery.

Association follows the ByteTrack pattern without a Kalman filter: high
confidence detections are matched first, the rest second. Detections left
over are tried against the lost-track buffer before a new identity is
issued. A lost track is recovered only when class, gap and distance all
agree::

    class(d) == class(track)
    t - t_last <= delta_tol
    ||C_d - C_last|| < max(2 * w_d, lambda_min)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

from .core import Detection, FrameRecord, Scenario, dump_jsonl, validate_scenario

ACTIVE, LOST, TERMINATED = "active", "lost", "terminated"
MATCHED, RECOVERED, NEW = "matched", "recovered", "new"


class TrackingError(ValueError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    iou_min: float = 0.3
    score_high: float = 0.5
    delta_tol: int = 15
    lambda_min: float = 60.0

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_min < 1.0:
            raise ValueError("iou_min must lie in (0, 1)")
        if not 0.0 <= self.score_high <= 1.0:
            raise ValueError("score_high must lie in [0, 1]")
        if self.delta_tol < 0:
            raise ValueError("delta_tol must be >= 0")
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be > 0")


@dataclass
class Track:
    track_id: int
    class_name: str
    history: list[tuple[int, Detection]] = field(default_factory=list)
    status: str = ACTIVE
    last_velocity: tuple[float, float] | None = None
    lost_spans: list[list[int]] = field(default_factory=list)

    @property
    def last_seen_frame(self) -> int:
        return self.history[-1][0]

    @property
    def last_detection(self) -> Detection:
        return self.history[-1][1]

    @property
    def last_center(self) -> tuple[float, float]:
        return self.last_detection.center

    @property
    def last_width(self) -> float:
        return self.last_detection.width

    @property
    def first_frame(self) -> int:
        return self.history[0][0]

    def observe(self, frame_index: int, det: Detection) -> None:
        if self.history:
            pf, pd = self.history[-1]
            gap = frame_index - pf
            (cx, cy), (px, py) = det.center, pd.center
            self.last_velocity = ((cx - px) / gap, (cy - py) / gap)
        self.history.append((frame_index, det))

    def snapshot(self) -> "LostTrack":
        return LostTrack(
            self.track_id,
            self.class_name,
            self.last_seen_frame,
            self.last_center,
            self.last_velocity or (0.0, 0.0),
        )


@dataclass(frozen=True)
class LostTrack:
    """Frozen view of a lost track at one frame, as the log renders it."""

    track_id: int
    class_name: str
    last_seen_frame: int
    last_center: tuple[float, float]
    last_velocity: tuple[float, float]
    status: str = LOST


@dataclass(frozen=True)
class Assignment:
    detection_index: int
    track_id: int
    origin: str


@dataclass
class TrackerState:
    tracks: dict[int, Track] = field(default_factory=dict)
    next_id: int = 1
    current_frame: int = 0
    passthrough: bool = False

    def with_status(self, status: str) -> list[Track]:
        return [t for _, t in sorted(self.tracks.items()) if t.status == status]

    @property
    def active(self) -> list[Track]:
        return self.with_status(ACTIVE)

    @property
    def lost(self) -> list[Track]:
        return self.with_status(LOST)


def iou(a: tuple[float, float, float, float] | Detection, b: tuple[float, float, float, float] | Detection) -> float:
    ax1, ay1, ax2, ay2 = a.box if isinstance(a, Detection) else a
    bx1, by1, bx2, by2 = b.box if isinstance(b, Detection) else b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def search_radius(candidate_width: float, cfg: TrackerConfig) -> float:
    return max(2.0 * candidate_width, cfg.lambda_min)


def recover_lost_track(candidate: Detection, frame_index: int, lost: Track | LostTrack, cfg: TrackerConfig) -> bool:
    if lost.status != LOST:
        raise TrackingError(f"track {lost.track_id} is {lost.status}, not lost")
    if candidate.class_name != lost.class_name:
        return False
    if frame_index - lost.last_seen_frame > cfg.delta_tol:
        return False
    return math.dist(candidate.center, lost.last_center) < search_radius(candidate.width, cfg)


def _greedy(dets: list[Detection], cand: list[int], tracks: list[Track], cfg: TrackerConfig) -> list[tuple[int, Track]]:
    pairs = []
    for i in cand:
        for t in tracks:
            if dets[i].class_name != t.class_name:
                continue
            v = iou(dets[i], t.last_detection)
            if v >= cfg.iou_min:
                pairs.append((-v, i, t.track_id, t))
    pairs.sort(key=lambda p: p[:3])
    used_d: set[int] = set()
    used_t: set[int] = set()
    out = []
    for _, i, tid, t in pairs:
        if i in used_d or tid in used_t:
            continue
        used_d.add(i)
        used_t.add(tid)
        out.append((i, t))
    return out


def _close_lost_span(t: Track, end: int) -> None:
    if t.lost_spans and t.lost_spans[-1][1] is None:
        t.lost_spans[-1][1] = end


def associate_frame(
    state: TrackerState, frame: FrameRecord, cfg: TrackerConfig
) -> tuple[TrackerState, list[Assignment]]:
    """Advance ``state`` by one frame, in place, and return it with assignments."""
    t_now = frame.frame_index
    if t_now <= state.current_frame:
        raise TrackingError(f"frame {t_now} does not follow frame {state.current_frame}")
    dets = list(frame.detections)
    assigned: dict[int, tuple[int, str]] = {}
    touched: set[int] = set()

    if state.passthrough:
        for i, d in enumerate(dets):
            if d.track_id is None:
                raise TrackingError(f"frame {t_now}: pass-through mode needs an id on every detection")
            if d.track_id in touched:
                raise TrackingError(f"frame {t_now}: duplicate id {d.track_id}")
            t = state.tracks.get(d.track_id)
            if t is None:
                t = state.tracks[d.track_id] = Track(d.track_id, d.class_name)
                origin = NEW
            elif t.class_name != d.class_name:
                raise TrackingError(f"frame {t_now}: id {d.track_id} changes class")
            elif t.status == ACTIVE:
                origin = MATCHED
            else:
                origin = RECOVERED if t.status == LOST else NEW
                _close_lost_span(t, t_now - 1)
                t.status = ACTIVE
            t.observe(t_now, d.with_id(d.track_id))
            assigned[i] = (d.track_id, origin)
            touched.add(d.track_id)
        state.next_id = max([state.next_id, *(k + 1 for k in state.tracks)])
    else:
        active = state.active
        high = [i for i, d in enumerate(dets) if d.score >= cfg.score_high]
        for stage_cands in (high, None):
            if stage_cands is None:
                stage_cands = [i for i in range(len(dets)) if i not in assigned]
            free = [t for t in active if t.track_id not in touched]
            for i, t in _greedy(dets, stage_cands, free, cfg):
                t.observe(t_now, dets[i].with_id(t.track_id))
                assigned[i] = (t.track_id, MATCHED)
                touched.add(t.track_id)

        lost_pool = state.lost
        for i, d in enumerate(dets):
            if i in assigned:
                continue
            ok = [t for t in lost_pool if recover_lost_track(d, t_now, t, cfg)]
            if not ok:
                continue
            best = min(ok, key=lambda t: (math.dist(d.center, t.last_center), t.track_id))
            lost_pool.remove(best)
            _close_lost_span(best, t_now - 1)
            best.status = ACTIVE
            best.observe(t_now, d.with_id(best.track_id))
            assigned[i] = (best.track_id, RECOVERED)
            touched.add(best.track_id)

        for i, d in enumerate(dets):
            if i in assigned or d.score < cfg.score_high:
                continue
            tid = state.next_id
            state.next_id += 1
            t = state.tracks[tid] = Track(tid, d.class_name)
            t.observe(t_now, d.with_id(tid))
            assigned[i] = (tid, NEW)
            touched.add(tid)

    for t in state.tracks.values():
        if t.track_id in touched or t.status == TERMINATED:
            continue
        if t.status == ACTIVE:
            t.status = LOST
            t.lost_spans.append([t_now, None])
        if t.status == LOST and t_now - t.last_seen_frame > cfg.delta_tol:
            t.status = TERMINATED
            _close_lost_span(t, t_now - 1)
            if t.lost_spans and t.lost_spans[-1][0] > t.lost_spans[-1][1]:
                t.lost_spans.pop()

    state.current_frame = t_now
    return state, [Assignment(i, *assigned[i]) for i in sorted(assigned)]


@dataclass(frozen=True)
class TrackedFrame:
    frame: FrameRecord
    assignments: tuple[Assignment, ...]
    lost: tuple[LostTrack, ...]


@dataclass
class TrackedScenario:
    scenario: Scenario
    frames: tuple[TrackedFrame, ...]
    tracks: dict[int, Track]
    passthrough: bool = False

    @property
    def T(self) -> int:
        return len(self.frames)

    def tracks_table(self) -> dict[str, Any]:
        rows = []
        for tid, t in sorted(self.tracks.items()):
            rows.append({
                "id": tid,
                "class": t.class_name,
                "first": t.first_frame,
                "last": t.last_seen_frame,
                "lost_spans": [list(span) for span in t.lost_spans],
            })
        return {"tracks": rows}

    def dump_jsonl(self) -> str:
        return dump_jsonl(self.scenario)

    def dump_tracks(self) -> str:
        return json.dumps(self.tracks_table(), indent=2) + "\n"


def stream_has_ids(s: Scenario) -> bool:
    dets = [d for _, d in s.iter_detections()]
    return bool(dets) and all(d.track_id is not None for d in dets)


def run_tracking(s: Scenario, cfg: TrackerConfig | None = None) -> TrackedScenario:
    """Track every frame of ``s`` in order.

    When every detection in the stream already carries an id, association is
    skipped and the ids are adopted as given. Otherwise incoming ids are
    ignored. Detections below ``score_high`` that match nothing stay
    untracked (``track_id`` None) and are dropped from downstream stages.
    """
    cfg = cfg or TrackerConfig()
    report = validate_scenario(s)
    if report:
        first = report.violations[0]
        raise TrackingError(f"invalid scenario: {first.rule} at {first.location}")
    passthrough = stream_has_ids(s)
    state = TrackerState(passthrough=passthrough)
    out_frames = []
    new_frames = []
    for fr in s.frames:
        state, assigns = associate_frame(state, fr, cfg)
        ids = {a.detection_index: a.track_id for a in assigns}
        new_fr = replace(fr, detections=tuple(d.with_id(ids.get(i)) for i, d in enumerate(fr.detections)))
        lost = tuple(t.snapshot() for t in state.lost)
        out_frames.append(TrackedFrame(new_fr, tuple(assigns), lost))
        new_frames.append(new_fr)
    last = s.frames[-1].frame_index if s.frames else 0
    for t in state.tracks.values():
        _close_lost_span(t, last)
    tracked = replace(s, frames=tuple(new_frames))
    return TrackedScenario(tracked, tuple(out_frames), state.tracks, passthrough)
