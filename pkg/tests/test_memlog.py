from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from railcom.core import Detection, FrameRecord, Scenario
from railcom.memlog import (
    NO_OBJECTS,
    LogEntry,
    LogParseError,
    LostItem,
    VisibleItem,
    coalesce_entries,
    direction_label,
    expand_entries,
    frame_entries,
    parse_event_log,
    parse_log_line,
    predict_lost_position,
    render_event_log,
    round_half_up,
)
from railcom.motion import KinematicState, MotionConfig, annotate_motion
from railcom.synth import Actor, SynthSpec, generate_scenario
from railcom.tracker import LOST, LostTrack, Track, run_tracking

CFG = MotionConfig()


def test_direction_label_examples():
    assert direction_label((9, 9), 0, KinematicState.STATIC, CFG) == "stationary"
    assert direction_label((-8, 2), 0, KinematicState.MOVING, CFG) == "moving left"
    assert direction_label((0.5, 0.1), 0.3, KinematicState.MOVING, CFG) == "approaching"
    assert direction_label((0.5, 0.1), -0.3, "Moving", CFG) == "receding"
    assert direction_label((1, -7), 0, "Moving", CFG) == "moving up"
    assert direction_label((3, 3), 0, "Moving", CFG) == "moving right"  # tie goes to the x axis


def test_direction_label_width_reference():
    # 4 px/frame beats tau_min but not tau_dyn = 0.1 * 60 = 6
    assert direction_label((4, 0), 0.3, "Moving", CFG) == "moving right"
    assert direction_label((4, 0), 0.3, "Moving", CFG, width=60) == "approaching"


def test_predict_lost_position():
    lt = LostTrack(1, "person", 5, (100, 100), (10, -5))
    assert predict_lost_position(lt, 8) == (130, 85)
    assert predict_lost_position(LostTrack(1, "person", 5, (7, 9), (0, 0)), 20) == (7, 9)
    with pytest.raises(ValueError):
        predict_lost_position(lt, 5)
    t = Track(2, "car")
    t.history.append((1, Detection(0, 0, 2, 2, "car")))
    with pytest.raises(ValueError):
        predict_lost_position(t, 3)  # active track
    t.status = LOST
    assert predict_lost_position(t, 3) == (1, 1)  # single observation: zero velocity


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, -0.5, 2.49)] == [1, 2, 3, 0, 2]


def _empty(T):
    s = Scenario("e", tuple(FrameRecord(t) for t in range(1, T + 1)))
    return annotate_motion(run_tracking(s))


def test_empty_log_lines():
    assert render_event_log(_empty(3)) == "Frame 1: No objects.\nFrame 2: No objects.\nFrame 3: No objects."
    assert render_event_log(_empty(3), coalesce=True) == "Frame 1 to Frame 3: No objects."


def test_case_style_visible_line():
    frames = tuple(
        FrameRecord(t, (Detection(152 - 8 * (t - 1), 230, 224 - 8 * (t - 1), 433, "person", 0.9, 4),))
        for t in range(1, 16)
    )
    mas = annotate_motion(run_tracking(Scenario("c", frames)))
    last = render_event_log(mas).splitlines()[-1]
    assert last == "Frame 15: person (ID:4) at [40,230,112,433] Motion: moving left"


def test_item_order_visible_then_lost():
    frames = (
        FrameRecord(1, (Detection(0, 0, 10, 10, "person", 1, 1), Detection(50, 0, 60, 10, "car", 1, 5))),
        FrameRecord(2, (Detection(50, 0, 60, 10, "car", 1, 5),)),
    )
    line = render_event_log(annotate_motion(run_tracking(Scenario("o", frames)))).splitlines()[1]
    assert line == (
        "Frame 2: car (ID:5) at [50,0,60,10] Motion: stationary | "
        "person (ID:1) [Occluded/Lost] predicted at approx [5, 5]"
    )


def test_parse_line_examples():
    e = parse_log_line("Frame 16 to Frame 20: No objects.")
    assert (e.start, e.end, e.items, e.n_frames) == (16, 20, (), 5)
    e = parse_log_line(
        "Frame 15: person (ID:4) at [40,230,112,433] Motion: moving left | "
        "person (ID:1) [Occluded/Lost] predicted at approx [1916, 1024]"
    )
    assert e.items == (
        VisibleItem("person", 4, (40, 230, 112, 433), "moving left"),
        LostItem("person", 1, (1916, 1024)),
    )
    for bad in ("Frame x: No objects.", "Frame 3: something else", "Frame 5 to Frame 2: No objects."):
        with pytest.raises(LogParseError):
            parse_log_line(bad)


def test_entry_invariants():
    with pytest.raises(ValueError):
        LogEntry(3, 2)
    assert LogEntry(1, 1).body() == NO_OBJECTS and LogEntry(1, 1).is_empty


# --------------------------------------------------------------- properties


@st.composite
def synth_specs(draw):
    T = draw(st.integers(2, 25))
    actors = []
    for _ in range(draw(st.integers(0, 4))):
        x, y = draw(st.integers(0, 1500)), draw(st.integers(0, 800))
        w, h = draw(st.integers(10, 120)), draw(st.integers(10, 200))
        a = draw(st.integers(1, T))
        b = draw(st.integers(a, T))
        actors.append(
            Actor(
                draw(st.sampled_from(["person", "car", "bicycle"])),
                (x, y, x + w, y + h),
                (draw(st.integers(-15, 15)), draw(st.integers(-10, 10))),
                draw(st.sampled_from([0.0, 0.05, 0.3, -0.2])),
                ((a, b),),
            )
        )
    return SynthSpec(T, tuple(actors), noise=draw(st.sampled_from([0.0, 1.5])), seed=draw(st.integers(0, 99)))


@settings(max_examples=120, deadline=None)
@given(synth_specs())
def test_log_round_trip_and_coalescing(spec):
    scenario, _ = generate_scenario(spec)
    mas = annotate_motion(run_tracking(scenario))
    entries = frame_entries(mas)
    text = render_event_log(mas)
    lines = text.splitlines()
    assert len(lines) == scenario.T
    for line, e in zip(lines, entries):
        back = parse_log_line(line)
        assert back == e
        assert back.render() == line
        assert back.is_empty == (back.body() == NO_OBJECTS)
    coalesced = render_event_log(mas, coalesce=True)
    assert "\n".join(e.render() for e in expand_entries(parse_event_log(coalesced))) == text
    # a coalesced entry never merges frames that render differently
    assert coalesce_entries(entries) == coalesce_entries(coalesce_entries(entries))


def test_frame_empty_iff_nothing_to_say():
    frames = (FrameRecord(1, (Detection(0, 0, 5, 5, "person", 0.2),)), FrameRecord(2))
    e = frame_entries(annotate_motion(run_tracking(Scenario("u", frames))))
    # the low-score detection never becomes a track, so both frames are empty
    assert [x.body() for x in e] == [NO_OBJECTS, NO_OBJECTS]
