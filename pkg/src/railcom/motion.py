"""Per-track kinematics: motion vectors, area change rate and the Moving/Static gate."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any

from .core import dump_jsonl
from .tracker import TrackedScenario


class KinematicState(str, enum.Enum):
    MOVING = "Moving"
    STATIC = "Static"


@dataclass(frozen=True)
class MotionConfig:
    tau_min: float = 2.0
    lambda_scale: float = 0.1
    gamma: float = 0.15
    dt: int = 1

    def __post_init__(self) -> None:
        if not self.tau_min > 0:
            raise ValueError("tau_min must be > 0")
        if self.lambda_scale < 0:
            raise ValueError("lambda_scale must be >= 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.dt < 1:
            raise ValueError("dt must be >= 1")


@dataclass(frozen=True)
class MotionSample:
    track_id: int
    frame_index: int
    velocity: tuple[float, float]
    area_rate: float
    tau_dyn: float
    state: KinematicState
    width: float

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


def motion_vector(curr_center: tuple[float, float], prev_center: tuple[float, float], dt: float = 1) -> tuple[float, float]:
    if dt < 1:
        raise ValueError("dt must be >= 1")
    return ((curr_center[0] - prev_center[0]) / dt, (curr_center[1] - prev_center[1]) / dt)


def area_change_rate(curr_area: float, prev_area: float) -> float:
    return (curr_area - prev_area) / prev_area


def dynamic_threshold(width: float, cfg: MotionConfig) -> float:
    return max(cfg.tau_min, cfg.lambda_scale * width)


def kinematic_state(v: tuple[float, float], rho: float, width: float, cfg: MotionConfig) -> KinematicState:
    if math.hypot(*v) >= dynamic_threshold(width, cfg) or abs(rho) > cfg.gamma:
        return KinematicState.MOVING
    return KinematicState.STATIC


@dataclass
class MotionAnnotatedScenario:
    tracked: TrackedScenario
    samples: dict[tuple[int, int], MotionSample]
    config: MotionConfig

    @property
    def scenario(self):
        return self.tracked.scenario

    @property
    def T(self) -> int:
        return self.tracked.T

    def sample_for(self, track_id: int, frame_index: int) -> MotionSample | None:
        return self.samples.get((track_id, frame_index))

    def moving_count(self, frame_index: int) -> int:
        fr_ids = [
            d.track_id
            for tf in self.tracked.frames
            if tf.frame.frame_index == frame_index
            for d in tf.frame.detections
            if d.track_id is not None
        ]
        return sum(
            1 for tid in fr_ids if self.samples[(tid, frame_index)].state is KinematicState.MOVING
        )

    def dump_jsonl(self) -> str:
        extras: dict[tuple[int, int], dict[str, Any]] = {}
        for tf in self.tracked.frames:
            for i, d in enumerate(tf.frame.detections):
                if d.track_id is None:
                    continue
                smp = self.samples[(d.track_id, tf.frame.frame_index)]
                extras[(tf.frame.frame_index, i)] = {
                    "vx": smp.velocity[0],
                    "vy": smp.velocity[1],
                    "rho": smp.area_rate,
                    "state": smp.state.value,
                }
        return dump_jsonl(self.scenario, extras)


def annotate_motion(ts: TrackedScenario, cfg: MotionConfig | None = None) -> MotionAnnotatedScenario:
    """Attach a :class:`MotionSample` to every visible (track, frame) pair.

    The reference observation is the latest visible one at or before
    ``t - dt``; after an occlusion the stride grows to cover the gap, so
    displacement is divided by the real number of elapsed frames. A track's
    first observation (or one with no reference yet) is Static with zero
    velocity.
    """
    cfg = cfg or MotionConfig()
    samples: dict[tuple[int, int], MotionSample] = {}
    for tid, track in ts.tracks.items():
        hist = track.history
        for k, (t, det) in enumerate(hist):
            ref = None
            for j in range(k - 1, -1, -1):
                if hist[j][0] <= t - cfg.dt:
                    ref = hist[j]
                    break
            w = det.width
            tau = dynamic_threshold(w, cfg)
            if ref is None:
                v, rho, state = (0.0, 0.0), 0.0, KinematicState.STATIC
            else:
                t_ref, d_ref = ref
                v = motion_vector(det.center, d_ref.center, t - t_ref)
                rho = area_change_rate(det.area, d_ref.area)
                state = kinematic_state(v, rho, w, cfg)
            samples[(tid, t)] = MotionSample(tid, t, v, rho, tau, state, w)
    return MotionAnnotatedScenario(ts, samples, cfg)
