"""Event-driven frame budget and keyframe selection.

Frames are addressed by 1-based position within the scenario, so a plan
over T frames always ends with keyframe T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence

from .motion import KinematicState, MotionAnnotatedScenario
from .tracker import NEW


@dataclass(frozen=True)
class EventWeights:
    new: float = 2.0
    moving: float = 1.0
    lost: float = 1.0

    def __post_init__(self) -> None:
        if min(self.new, self.moving, self.lost) < 0:
            raise ValueError("event weights must be non-negative")


@dataclass(frozen=True)
class SamplerConfig:
    k_max: int = 8
    alpha: float = 0.5
    tau_low: float = 10.0
    tau_high: float = 30.0
    weights: EventWeights = EventWeights()

    def __post_init__(self) -> None:
        if self.k_max < 3:
            raise ValueError("k_max must be >= 3")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.tau_low > self.tau_high:
            raise ValueError("tau_low must not exceed tau_high")


@dataclass(frozen=True)
class EventCounts:
    new: int = 0
    moving: int = 0
    lost: int = 0


@dataclass(frozen=True)
class SamplingPlan:
    scores: tuple[float, ...]
    S: float
    K: int
    keyframes: tuple[int, ...]
    tau_low: float
    tau_high: float

    @property
    def T(self) -> int:
        return len(self.scores)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scores": list(self.scores),
            "S": self.S,
            "K": self.K,
            "keyframes": list(self.keyframes),
            "tau_low": self.tau_low,
            "tau_high": self.tau_high,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "SamplingPlan":
        return cls(
            tuple(obj["scores"]), obj["S"], obj["K"], tuple(obj["keyframes"]), obj["tau_low"], obj["tau_high"]
        )


def event_score(counts: EventCounts | tuple[int, int, int], weights: EventWeights = EventWeights()) -> float:
    n_new, n_moving, n_lost = (counts.new, counts.moving, counts.lost) if isinstance(counts, EventCounts) else counts
    if min(n_new, n_moving, n_lost) < 0:
        raise ValueError("event counts must be non-negative")
    return weights.new * n_new + weights.moving * n_moving + weights.lost * n_lost


def frame_event_counts(mas: MotionAnnotatedScenario) -> list[EventCounts]:
    """Per-frame appearances, Moving observations and active-to-lost transitions."""
    lost_starts: dict[int, int] = {}
    for t in mas.tracked.tracks.values():
        for span in t.lost_spans:
            lost_starts[span[0]] = lost_starts.get(span[0], 0) + 1
    out = []
    for tf in mas.tracked.frames:
        f = tf.frame.frame_index
        n_new = sum(1 for a in tf.assignments if a.origin == NEW)
        n_moving = sum(
            1
            for d in tf.frame.detections
            if d.track_id is not None and mas.samples[(d.track_id, f)].state is KinematicState.MOVING
        )
        out.append(EventCounts(n_new, n_moving, lost_starts.get(f, 0)))
    return out


def allocate_budget(scores: Sequence[float], cfg: SamplerConfig) -> tuple[float, int]:
    if not scores:
        raise ValueError("need at least one frame score")
    S = float(sum(scores))
    if S >= cfg.tau_high:
        K = cfg.k_max
    elif S >= cfg.tau_low:
        K = max(3, math.floor(cfg.alpha * cfg.k_max))
    else:
        K = 2
    return S, K


def segment_bounds(T: int, K: int) -> list[tuple[int, int]]:
    """Inclusive frame ranges of the K-1 segments covering frames 1..T-1."""
    n = T - 1
    return [((k - 1) * n // (K - 1) + 1, k * n // (K - 1)) for k in range(1, K)]


def select_keyframes(scores: Sequence[float], K: int) -> tuple[int, ...]:
    if K < 2:
        raise ValueError("budget K must be >= 2")
    T = len(scores)
    if T < 1:
        raise ValueError("need at least one frame")
    if T <= K:
        return tuple(range(1, T + 1))
    picks = []
    for lo, hi in segment_bounds(T, K):
        best = lo
        for t in range(lo + 1, hi + 1):
            if scores[t - 1] > scores[best - 1]:
                best = t
        picks.append(best)
    picks.append(T)
    return tuple(picks)


def uniform_keyframes(T: int, K: int) -> tuple[int, ...]:
    """Baseline: the middle frame of each segment, plus the last frame."""
    if K < 2:
        raise ValueError("budget K must be >= 2")
    if T <= K:
        return tuple(range(1, T + 1))
    return tuple((lo + hi) // 2 for lo, hi in segment_bounds(T, K)) + (T,)


def nearest_rank(values: Sequence[float], p: Fraction | float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(Fraction(p) * len(ordered)))
    return ordered[rank - 1]


def calibrate_thresholds(
    complexities: Sequence[float], low_pct: Fraction = Fraction(1, 4), high_pct: Fraction = Fraction(3, 4)
) -> tuple[float, float]:
    if not complexities:
        raise ValueError("calibration set is empty")
    return nearest_rank(complexities, low_pct), nearest_rank(complexities, high_pct)


def plan_sampling(scores: Sequence[float], cfg: SamplerConfig) -> SamplingPlan:
    S, K = allocate_budget(scores, cfg)
    return SamplingPlan(tuple(scores), S, K, select_keyframes(scores, K), cfg.tau_low, cfg.tau_high)


def plan_for_scenario(mas: MotionAnnotatedScenario, cfg: SamplerConfig) -> SamplingPlan:
    scores = [event_score(c, cfg.weights) for c in frame_event_counts(mas)]
    return plan_sampling(scores, cfg)
