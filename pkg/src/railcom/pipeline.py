"""End-to-end inference: ingest, track, analyse, log, sample, prompt, complete, parse."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence, TypeVar

from .config import PipelineConfig
from .core import Scenario, load_manifest
from .evaluation import QuestionRecord, RunReport
from .gateway import Gateway
from .memlog import LogEntry, log_entries
from .motion import annotate_motion
from .prompting import (
    CoTParseError,
    PromptBundle,
    Templates,
    compose_dynamic_prompt,
    compose_static_prompt,
    extract_choice,
    parse_cot_response,
)
from .sampler import SamplingPlan, plan_for_scenario
from .tracker import TrackedScenario, run_tracking

log = logging.getLogger(__name__)

T = TypeVar("T")

# one distinct exit code per failing stage
STAGE_EXIT_CODES = {
    "config": 3,
    "ingest": 4,
    "track": 5,
    "motion": 6,
    "log": 7,
    "sample": 8,
    "prompt": 9,
    "complete": 10,
    "parse": 11,
    "judge": 12,
    "report": 13,
    "qa": 14,
    "synth": 15,
    "output": 16,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, scenario_id: str, cause: BaseException | str):
        self.stage = stage
        self.scenario_id = scenario_id
        self.cause = cause
        super().__init__(f"[{stage}] scenario {scenario_id}: {cause}")

    @property
    def exit_code(self) -> int:
        return STAGE_EXIT_CODES.get(self.stage, 1)


@dataclass
class Analysis:
    """Everything the prompt stage needs from one scenario."""

    scenario: Scenario
    tracked: TrackedScenario
    log_text: str | None
    plan: SamplingPlan | None
    entries: list[LogEntry] | None = None


class _Stopwatch:
    def __init__(self) -> None:
        self.ms = 0.0

    def run(self, stage: str, scenario_id: str, fn: Callable[[], T]) -> T:
        t0 = time.perf_counter()
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, scenario_id, exc) from exc
        finally:
            self.ms += (time.perf_counter() - t0) * 1000.0


def analyze_scenario(scenario: Scenario, cfg: PipelineConfig, watch: _Stopwatch | None = None) -> Analysis:
    watch = watch or _Stopwatch()
    sid = scenario.id
    tracked = watch.run("track", sid, lambda: run_tracking(scenario, cfg.tracker))
    if scenario.T == 1:
        return Analysis(scenario, tracked, None, None)
    mas = watch.run("motion", sid, lambda: annotate_motion(tracked, cfg.motion))
    entries = watch.run("log", sid, lambda: log_entries(mas, cfg.prompting.coalesce))
    text = "\n".join(e.render() for e in entries)
    plan = watch.run("sample", sid, lambda: plan_for_scenario(mas, cfg.sampler))
    return Analysis(scenario, tracked, text, plan, entries)


def _image_refs(scenario: Scenario, base: Path | None) -> dict[int, str | None]:
    refs: dict[int, str | None] = {}
    for pos, fr in enumerate(scenario.frames, start=1):
        ref = fr.image_ref
        if ref and base is not None and "://" not in ref and not Path(ref).is_absolute():
            ref = str(base / ref)
        refs[pos] = ref
    return refs


def build_bundles(
    a: Analysis, cfg: PipelineConfig, templates: Templates, image_base: Path | None = None
) -> list[PromptBundle]:
    s = a.scenario
    out = []
    for q in s.questions:
        if a.plan is None:
            fr = a.tracked.scenario.frames[0]
            if fr.image_ref and image_base is not None:
                fr = replace(fr, image_ref=_image_refs(s, image_base)[1])
            out.append(compose_static_prompt(fr, None, q, scenario_id=s.id, templates=templates))
        else:
            refs = _image_refs(s, image_base)
            out.append(
                compose_dynamic_prompt(
                    a.plan,
                    a.log_text or "",
                    q,
                    {t: refs[t] for t in a.plan.keyframes},
                    defensive=cfg.prompting.defensive,
                    scenario_id=s.id,
                    templates=templates,
                    log_entries=a.entries,
                )
            )
    return out


def infer_scenario(
    scenario: Scenario,
    cfg: PipelineConfig,
    gateway: Gateway,
    *,
    image_base: Path | None = None,
    watch: _Stopwatch | None = None,
) -> tuple[RunReport, Analysis]:
    watch = watch or _Stopwatch()
    sid = scenario.id
    if not scenario.questions:
        raise StageError("ingest", sid, "scenario has no questions")
    templates = watch.run("prompt", sid, lambda: Templates.load(cfg.prompting.templates_dir))
    analysis = analyze_scenario(scenario, cfg, watch)
    bundles = watch.run("prompt", sid, lambda: build_bundles(analysis, cfg, templates, image_base))
    records = []
    for q, b in zip(scenario.questions, bundles):
        try:
            res = gateway.complete(b)
        except Exception as exc:
            raise StageError("complete", sid, exc) from exc
        t0 = time.perf_counter()
        cot, err = None, None
        try:
            cot = parse_cot_response(res.text)
        except CoTParseError as exc:
            if cfg.prompting.strict_parse:
                raise StageError("parse", sid, exc) from exc
            err = str(exc)
            log.warning("scenario %s: %s", sid, err)
        choice = None
        if q.options:
            choice = extract_choice(cot if cot is not None else res.text, q.options)
        if cot is not None and choice is not None:
            cot = replace(cot, choice_letter=choice)
        watch.ms += (time.perf_counter() - t0) * 1000.0
        plan = analysis.plan
        records.append(
            QuestionRecord(
                question=q.text,
                mode=b.mode,
                defensive=b.defensive,
                tokens=res.completion_tokens,
                latency_ms=int(round(res.latency_ms)),
                keyframes=list(plan.keyframes) if plan else None,
                K=plan.K if plan else None,
                S=plan.S if plan else None,
                cot=cot,
                parse_error=err,
                choice=choice,
                gold=q.gold,
                estimated_tokens=res.estimated,
                attempts=res.attempt_count,
            )
        )
    middleware = int(round(watch.ms)) if cfg.report.include_middleware_latency else 0
    report = RunReport(sid, records, middleware, invert_penalty=cfg.report.invert_penalty)
    return report, analysis


def run_infer_pipeline(
    manifest_path: str | Path,
    cfg: PipelineConfig,
    gateway: Gateway,
    *,
    out_dir: str | Path | None = None,
    timestamp: bool = True,
) -> RunReport:
    """Run one manifest through every stage and write its report and log."""
    manifest_path = Path(manifest_path)
    watch = _Stopwatch()
    scenario = watch.run("ingest", manifest_path.stem, lambda: load_manifest(manifest_path))
    report, analysis = infer_scenario(scenario, cfg, gateway, image_base=manifest_path.parent, watch=watch)
    if cfg.report.include_middleware_latency:
        report.middleware_ms = int(round(watch.ms))
    if timestamp:
        report.generated_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    target = Path(out_dir if out_dir is not None else cfg.out_dir)
    try:
        target.mkdir(parents=True, exist_ok=True)
        (target / f"{scenario.id}.report.json").write_text(report.to_json(), encoding="utf-8")
        if analysis.log_text is not None:
            (target / f"{scenario.id}.log.txt").write_text(analysis.log_text + "\n", encoding="utf-8")
    except OSError as exc:
        raise StageError("output", scenario.id, exc) from exc
    return report


def run_many(
    manifests: Sequence[str | Path],
    cfg: PipelineConfig,
    gateway: Gateway,
    *,
    jobs: int = 1,
    out_dir: str | Path | None = None,
    timestamp: bool = True,
) -> list[RunReport]:
    """Scenario-level parallelism; the first failure (in input order) is raised."""
    if jobs <= 1:
        return [run_infer_pipeline(m, cfg, gateway, out_dir=out_dir, timestamp=timestamp) for m in manifests]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(run_infer_pipeline, m, cfg, gateway, out_dir=out_dir, timestamp=timestamp)
            for m in manifests
        ]
        return [f.result() for f in futures]
