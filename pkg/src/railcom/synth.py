"""Scripted synthetic detection streams with exact ground truth.

Each actor follows a constant-velocity centre path and a constant per-frame
area growth rate about that centre. Jitter, when enabled, moves centres
only, so box sizes (and area rates) stay exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import Detection, FrameRecord, Question, Scenario, question_to_dict


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class Actor:
    class_name: str
    box: tuple[float, float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    area_growth: float = 0.0
    visible: tuple[tuple[int, int], ...] = ()
    score: float = 0.9

    def size_at(self, t: int) -> tuple[float, float]:
        x1, y1, x2, y2 = self.box
        s = (1.0 + self.area_growth) ** ((t - 1) / 2.0)
        return (x2 - x1) * s, (y2 - y1) * s

    def center_at(self, t: int) -> tuple[float, float]:
        x1, y1, x2, y2 = self.box
        return ((x1 + x2) / 2.0 + self.velocity[0] * (t - 1), (y1 + y2) / 2.0 + self.velocity[1] * (t - 1))

    def visible_at(self, t: int) -> bool:
        return any(a <= t <= b for a, b in self.visible)

    def frames(self) -> list[int]:
        return sorted({t for a, b in self.visible for t in range(a, b + 1)})


@dataclass(frozen=True)
class SynthSpec:
    T: int
    actors: tuple[Actor, ...] = ()
    image_size: tuple[int, int] = (1920, 1080)
    noise: float = 0.0
    seed: int = 0
    id: str = "synthetic"
    questions: tuple[Question, ...] = ()

    def check(self) -> None:
        if self.T < 1:
            raise SynthError("T must be >= 1")
        if self.noise < 0:
            raise SynthError("noise std must be >= 0")
        for i, a in enumerate(self.actors):
            x1, y1, x2, y2 = a.box
            if x2 <= x1 or y2 <= y1:
                raise SynthError(f"actor {i}: start box has no positive area")
            if a.area_growth <= -1.0:
                raise SynthError(f"actor {i}: area growth {a.area_growth} collapses the box")
            for lo, hi in a.visible:
                if not 1 <= lo <= hi <= self.T:
                    raise SynthError(f"actor {i}: visible span ({lo}, {hi}) outside 1..{self.T}")
            for t in a.frames():
                w, h = a.size_at(t)
                if not (w > 0 and h > 0 and math.isfinite(w * h)):
                    raise SynthError(f"actor {i}: box loses positive area at frame {t}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "T": self.T,
            "image_size": list(self.image_size),
            "noise": self.noise,
            "seed": self.seed,
            "actors": [
                {
                    "class": a.class_name,
                    "box": list(a.box),
                    "velocity": list(a.velocity),
                    "area_growth": a.area_growth,
                    "visible": [list(s) for s in a.visible],
                    "score": a.score,
                }
                for a in self.actors
            ],
            "questions": [question_to_dict(q) for q in self.questions],
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "SynthSpec":
        try:
            actors = tuple(
                Actor(
                    a["class"],
                    tuple(float(v) for v in a["box"]),
                    tuple(float(v) for v in a.get("velocity", (0, 0))),
                    float(a.get("area_growth", 0.0)),
                    tuple((int(s[0]), int(s[1])) for s in a.get("visible", [[1, obj["T"]]])),
                    float(a.get("score", 0.9)),
                )
                for a in obj.get("actors", [])
            )
            questions = tuple(
                Question(q["text"], q.get("options"), q.get("gold")) for q in obj.get("questions", [])
            )
            return cls(
                T=int(obj["T"]),
                actors=actors,
                image_size=tuple(obj.get("image_size", (1920, 1080))),
                noise=float(obj.get("noise", 0.0)),
                seed=int(obj.get("seed", 0)),
                id=str(obj.get("id", "synthetic")),
                questions=questions,
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise SynthError(f"malformed synth spec: {exc}") from None


@dataclass(frozen=True)
class ActorFrame:
    center: tuple[float, float]
    area: float
    velocity: tuple[float, float]
    area_rate: float
    state: str


@dataclass
class GroundTruth:
    """Script-derived truth. Actor i is expected to keep one identity."""

    actor_classes: list[str]
    frames: list[dict[int, ActorFrame]]
    appearances: list[list[int]]
    disappearances: list[list[int]]
    motion: dict[str, float] = field(default_factory=dict)

    @property
    def event_frames(self) -> list[int]:
        return sorted({t for a in self.appearances for t in a} | {t for d in self.disappearances for t in d})

    def to_dict(self) -> dict[str, Any]:
        return {
            "motion_config": self.motion,
            "event_frames": self.event_frames,
            "actors": [
                {
                    "identity": i,
                    "class": cls,
                    "appearances": self.appearances[i],
                    "disappearances": self.disappearances[i],
                    "frames": {
                        str(t): {
                            "center": list(f.center),
                            "area": f.area,
                            "velocity": list(f.velocity),
                            "area_rate": f.area_rate,
                            "state": f.state,
                        }
                        for t, f in sorted(self.frames[i].items())
                    },
                }
                for i, cls in enumerate(self.actor_classes)
            ],
        }


def _truth_for(actor: Actor, tau_min: float, lam: float, gamma: float, dt: int) -> dict[int, ActorFrame]:
    out: dict[int, ActorFrame] = {}
    seen: list[int] = []
    for t in actor.frames():
        w, h = actor.size_at(t)
        ref = next((p for p in reversed(seen) if p <= t - dt), None)
        if ref is None:
            state = "Static"
            rate = 0.0
            vel = (0.0, 0.0)
        else:
            rate = (1.0 + actor.area_growth) ** (t - ref) - 1.0
            vel = actor.velocity
            speed = math.sqrt(vel[0] ** 2 + vel[1] ** 2)
            moving = speed >= max(tau_min, lam * w) or abs(rate) > gamma
            state = "Moving" if moving else "Static"
        out[t] = ActorFrame(actor.center_at(t), w * h, vel, rate, state)
        seen.append(t)
    return out


def _spans(frames: Sequence[int]) -> list[tuple[int, int]]:
    spans: list[tuple[int, int]] = []
    for t in frames:
        if spans and t == spans[-1][1] + 1:
            spans[-1] = (spans[-1][0], t)
        else:
            spans.append((t, t))
    return spans


def generate_scenario(
    spec: SynthSpec,
    *,
    tau_min: float = 2.0,
    lambda_scale: float = 0.1,
    gamma: float = 0.15,
    dt: int = 1,
) -> tuple[Scenario, GroundTruth]:
    """Emit the detection stream (no ids) and its ground truth.

    The motion parameters only affect the ground-truth Moving/Static labels.
    ``disappearances`` lists the first missing frame after each visible span
    that ends before T.
    """
    spec.check()
    rng = np.random.default_rng(spec.seed)
    frames = []
    for t in range(1, spec.T + 1):
        dets = []
        for a in spec.actors:
            if not a.visible_at(t):
                continue
            cx, cy = a.center_at(t)
            if spec.noise > 0:
                jx, jy = rng.normal(0.0, spec.noise, size=2)
                cx, cy = cx + float(jx), cy + float(jy)
            w, h = a.size_at(t)
            dets.append(Detection(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, a.class_name, a.score))
        frames.append(FrameRecord(t, tuple(dets)))
    scenario = Scenario(spec.id, tuple(frames), questions=spec.questions)

    truth_frames, apps, gones = [], [], []
    for a in spec.actors:
        truth_frames.append(_truth_for(a, tau_min, lambda_scale, gamma, dt))
        spans = _spans(a.frames())
        apps.append([lo for lo, _ in spans])
        gones.append([hi + 1 for _, hi in spans if hi < spec.T])
    motion = {"tau_min": tau_min, "lambda_scale": lambda_scale, "gamma": gamma, "dt": dt}
    return scenario, GroundTruth([a.class_name for a in spec.actors], truth_frames, apps, gones, motion)


def load_spec(path: str | Path) -> SynthSpec:
    return SynthSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- presets

CASE1_QUESTION = "What dynamic trend is observed in the pedestrian movement across the railway tracks?"
CASE2_QUESTION = "What dynamic event is occurring on the railway tracks in the sequence?"


def _intrusion_crossing() -> SynthSpec:
    # ids 1-4 follow actor order; actor 4 passes [40,230,112,433] at frame 15
    return SynthSpec(
        T=20,
        id="intrusion_crossing",
        actors=(
            Actor("person", (1470, 525, 1530, 675), (20, 10), visible=((1, 10),)),
            Actor("person", (300, 400, 360, 560), visible=((1, 20),)),
            Actor("person", (700, 500, 760, 660), (12, 0), visible=((1, 7), (11, 20))),
            Actor("person", (152, 230, 224, 433), (-8, 0), visible=((1, 20),)),
        ),
        questions=(Question(CASE1_QUESTION),),
    )


def _occlusion_gap() -> SynthSpec:
    return SynthSpec(
        T=12,
        id="occlusion_gap",
        actors=(Actor("person", (600, 400, 650, 540), (3, 0), visible=((1, 5), (9, 12))),),
        questions=(Question("Is the pedestrian near the track still present after the occlusion?"),),
    )


def _empty_track() -> SynthSpec:
    return SynthSpec(T=20, id="empty_track", questions=(Question(CASE2_QUESTION),))


def _approaching_object() -> SynthSpec:
    return SynthSpec(
        T=10,
        id="approaching_object",
        actors=(Actor("car", (910, 570, 1010, 630), area_growth=0.3, visible=((1, 10),)),),
        questions=(
            Question(
                "How is the vehicle ahead moving relative to the train?",
                {"A": "It is stationary", "B": "It is approaching the train", "C": "It is moving away"},
                "B",
            ),
        ),
    )


PRESETS = {
    "intrusion_crossing": _intrusion_crossing,
    "occlusion_gap": _occlusion_gap,
    "empty_track": _empty_track,
    "approaching_object": _approaching_object,
}


def preset(name: str, **overrides: Any) -> SynthSpec:
    try:
        spec = PRESETS[name]()
    except KeyError:
        raise SynthError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None
    if overrides:
        spec = replace(spec, **overrides)
    return spec
