"""Command-line entry point: ``railcom <command> ...``.

Stage commands read the previous stage's file output, so the pipeline can be
rerun piecewise:

    railcom synth intrusion_crossing --out work/
    railcom track work/stream.jsonl --out work/tracked.jsonl
    railcom analyze work/tracked.jsonl --out work/motion.jsonl
    railcom log work/motion.jsonl --out work/log.txt
    railcom sample work/motion.jsonl --out work/plan.json
    railcom infer work/manifest.json --mock script.json --out runs/a
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .config import ConfigError, PipelineConfig, config_to_dict, load_config
from .core import ManifestError, Scenario, StreamParseError, dump_jsonl, read_stream, validate_scenario, write_manifest
from .evaluation import (
    EvaluationError,
    JudgeParseError,
    QaRecord,
    QaValidationError,
    RunReport,
    build_generation_prompt,
    build_judge_prompt,
    parse_judge_scores,
    validate_qa_record,
)
from .gateway import Gateway, GatewayError, load_mock_script
from .memlog import log_entries
from .motion import annotate_motion
from .pipeline import STAGE_EXIT_CODES, StageError, run_many
from .report import ReportError, compare_paths, parse_run_args
from .sampler import calibrate_thresholds, plan_for_scenario
from .synth import PRESETS, SynthError, generate_scenario, load_spec, preset
from .tracker import run_tracking

log = logging.getLogger("railcom")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2  # argparse's own code
EXIT_CODES = {"usage": EXIT_USAGE, "internal": EXIT_INTERNAL, **STAGE_EXIT_CODES}


# ------------------------------------------------------------------ helpers


def _write(text: str, out: str | None, what: str = "output") -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StageError("output", what, exc) from exc


def _stage(stage: str, sid: str, fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, sid, exc) from exc


def _config(args: argparse.Namespace) -> PipelineConfig:
    over: dict[str, Any] = {}
    if getattr(args, "coalesce", False):
        over.setdefault("prompting", {})["coalesce"] = True
    if getattr(args, "no_defensive", False):
        over.setdefault("prompting", {})["defensive"] = False
    if getattr(args, "jobs", None) is not None:
        over["jobs"] = args.jobs
    if getattr(args, "out_dir", None) is not None:
        over["out_dir"] = args.out_dir
    if getattr(args, "mock", None) is not None:
        over.setdefault("backend", {})["mode"] = "mock"
    if getattr(args, "invert_penalty", False):
        over.setdefault("report", {})["invert_penalty"] = True
    try:
        return load_config(args.config, over)
    except ConfigError as exc:
        raise StageError("config", "-", exc) from exc


def _gateway(cfg: PipelineConfig, args: argparse.Namespace) -> Gateway:
    script = None
    if getattr(args, "mock", None):
        try:
            script = load_mock_script(args.mock)
        except (OSError, ValueError, GatewayError) as exc:
            raise StageError("config", "-", f"mock script {args.mock}: {exc}") from exc
    try:
        return Gateway(cfg.backend, mock_script=script, mock_sleep=getattr(args, "mock_sleep", False))
    except GatewayError as exc:
        raise StageError("config", "-", exc) from exc


def _read(path: str, fmt: str | None) -> Scenario:
    sid = Path(path).stem
    try:
        return read_stream(path, fmt)
    except (OSError, StreamParseError, ValueError) as exc:
        raise StageError("ingest", sid, exc) from exc


def _analysis(args: argparse.Namespace, cfg: PipelineConfig):
    s = _read(args.input, args.format)
    tracked = _stage("track", s.id, lambda: run_tracking(s, cfg.tracker))
    return _stage("motion", s.id, lambda: annotate_motion(tracked, cfg.motion))


# ------------------------------------------------------------------ commands


def cmd_ingest(args: argparse.Namespace) -> int:
    s = _read(args.input, args.format)
    report = validate_scenario(s)
    if report:
        for v in report.violations:
            print(f"invalid: {v.rule} at {v.location}", file=sys.stderr)
        raise StageError("ingest", s.id, f"{len(report.violations)} schema violation(s)")
    n = sum(len(f.detections) for f in s.frames)
    print(f"{s.id}: {s.T} frames, {n} detections", file=sys.stderr)
    _write(dump_jsonl(s), args.out)
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    cfg = _config(args)
    s = _read(args.input, args.format)
    tracked = _stage("track", s.id, lambda: run_tracking(s, cfg.tracker))
    _write(tracked.dump_jsonl(), args.out)
    if args.tracks:
        _write(tracked.dump_tracks(), args.tracks)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _config(args)
    mas = _analysis(args, cfg)
    _write(mas.dump_jsonl(), args.out)
    return EXIT_OK


def cmd_log(args: argparse.Namespace) -> int:
    cfg = _config(args)
    mas = _analysis(args, cfg)
    entries = _stage("log", mas.scenario.id, lambda: log_entries(mas, cfg.prompting.coalesce))
    _write("".join(e.render() + "\n" for e in entries), args.out)
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = _config(args)
    mas = _analysis(args, cfg)
    plan = _stage("sample", mas.scenario.id, lambda: plan_for_scenario(mas, cfg.sampler))
    _write(json.dumps(plan.to_dict(), indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    values = []
    for path in args.inputs:
        s = _read(path, args.format)
        tracked = _stage("track", s.id, lambda: run_tracking(s, cfg.tracker))
        mas = _stage("motion", s.id, lambda: annotate_motion(tracked, cfg.motion))
        plan = _stage("sample", s.id, lambda: plan_for_scenario(mas, cfg.sampler))
        print(f"{s.id}\tS={plan.S:g}", file=sys.stderr)
        values.append(plan.S)
    lo, hi = _stage("sample", "calibration", lambda: calibrate_thresholds(values))
    # the snippet is valid YAML, so it can be passed back via --config
    _write(json.dumps({"sampler": {"tau_low": lo, "tau_high": hi}}, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _config(args)
    with _gateway(cfg, args) as gw:
        reports = run_many(args.manifests, cfg, gw, jobs=cfg.jobs, out_dir=cfg.out_dir, timestamp=not args.no_timestamp)
    for r in reports:
        t = r.totals()
        print(f"{r.scenario}\ttokens={t['tokens']}\tlatency_ms={t['latency_ms']}\tstps={t['stps']:.2f}", file=sys.stderr)
    return EXIT_OK


def _load_references(path: str) -> dict[str, list[QaRecord | str]]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError("judge", "-", f"references {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise StageError("judge", "-", "references must map scenario id to reference(s)")
    out: dict[str, list[QaRecord | str]] = {}
    for sid, refs in obj.items():
        refs = refs if isinstance(refs, list) else [refs]
        items: list[QaRecord | str] = []
        for ref in refs:
            if isinstance(ref, str):
                items.append(ref)
            else:
                try:
                    items.append(validate_qa_record(ref))
                except QaValidationError as exc:
                    raise StageError("judge", sid, f"reference record invalid: {exc}") from exc
        out[sid] = items
    return out


def cmd_judge(args: argparse.Namespace) -> int:
    cfg = _config(args)
    refs = _load_references(args.references)
    reports: list[tuple[Path, RunReport]] = []
    for p in args.reports:
        try:
            reports.append((Path(p), RunReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8")))))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise StageError("judge", Path(p).stem, f"cannot read report: {exc}") from exc

    jobs: list[tuple[Any, Any]] = []  # (question record, bundle)
    for _, rep in reports:
        rr = refs.get(rep.scenario)
        if rr is None:
            raise StageError("judge", rep.scenario, "no reference for scenario")
        for i, q in enumerate(rep.questions):
            if q.cot is None:
                q.judge_error = "prediction has no parsed chain of thought"
                continue
            ref = rr[i] if i < len(rr) else rr[-1]
            try:
                b = build_judge_prompt(q.cot, ref, question=q.question, scenario_id=rep.scenario)
            except EvaluationError as exc:
                q.judge_error = str(exc)
                continue
            jobs.append((q, b))

    failures = 0
    with _gateway(cfg, args) as gw:
        results = gw.complete_many([b for _, b in jobs], jobs=cfg.jobs)
    for (q, _), res in zip(jobs, results):
        if isinstance(res, GatewayError):
            q.judge_error = str(res)
            continue
        try:
            q.judge = parse_judge_scores(res.text)
            q.judge_error = None
        except JudgeParseError as exc:
            q.judge_error = str(exc)
    out_dir = Path(cfg.out_dir)
    for _, rep in reports:
        rep.invert_penalty = cfg.report.invert_penalty
        failures += sum(1 for q in rep.questions if q.judge_error)
        _write(rep.to_json(), str(out_dir / f"{rep.scenario}.report.json"), rep.scenario)
        t = rep.totals()
        overall = "-" if t["overall"] is None else f"{t['overall']:.2f}"
        print(f"{rep.scenario}\tjudged={t['judged']}\toverall={overall}", file=sys.stderr)
    if failures:
        print(f"{failures} question(s) could not be judged", file=sys.stderr)
        return STAGE_EXIT_CODES["judge"]
    return EXIT_OK


def cmd_generate_qa(args: argparse.Namespace) -> int:
    cfg = _config(args)
    bundles = [build_generation_prompt(img, Path(img).stem) for img in args.images]
    with _gateway(cfg, args) as gw:
        results = gw.complete_many(bundles, jobs=cfg.jobs)
    lines, bad = [], 0
    for img, res in zip(args.images, results):
        row: dict[str, Any] = {"image": img}
        if isinstance(res, GatewayError):
            row["error"] = str(res)
            bad += 1
        else:
            try:
                row["record"] = validate_qa_record(res.text).to_dict()
            except QaValidationError as exc:
                row["violations"] = list(exc.violations)
                bad += 1
        lines.append(json.dumps(row, ensure_ascii=False))
    _write("".join(line + "\n" for line in lines), args.out)
    if bad:
        print(f"{bad} of {len(lines)} record(s) rejected", file=sys.stderr)
        return STAGE_EXIT_CODES["qa"]
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _config(args)
    try:
        spec = preset(args.spec) if args.spec in PRESETS else load_spec(args.spec)
        kw: dict[str, Any] = {}
        if args.seed is not None:
            kw["seed"] = args.seed
        if args.noise is not None:
            kw["noise"] = args.noise
        if kw:
            spec = replace(spec, **kw)
        m = cfg.motion
        scenario, truth = generate_scenario(spec, tau_min=m.tau_min, lambda_scale=m.lambda_scale, gamma=m.gamma, dt=m.dt)
    except (OSError, ValueError, SynthError) as exc:
        raise StageError("synth", Path(args.spec).stem, exc) from exc
    out = Path(args.out_dir or ".")
    _write(dump_jsonl(scenario), str(out / "stream.jsonl"), scenario.id)
    _write(json.dumps(truth.to_dict(), indent=2) + "\n", str(out / "ground_truth.json"), scenario.id)
    try:
        write_manifest(scenario, out / "manifest.json", "stream.jsonl")
    except OSError as exc:
        raise StageError("output", scenario.id, exc) from exc
    print(f"{scenario.id}: {scenario.T} frames written to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        comp = compare_paths(parse_run_args(args.runs))
    except ReportError as exc:
        raise StageError("report", "-", exc) from exc
    table = comp.table()
    if args.json:
        _write(comp.to_json(), args.json)
    if args.table:
        _write(table, args.table)
    if not args.table:
        sys.stdout.write(table)
    return EXIT_OK


def cmd_config(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _write(json.dumps(config_to_dict(cfg), indent=2) + "\n", args.out)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file")
    common.add_argument("-v", "--verbose", action="store_true")

    stream = argparse.ArgumentParser(add_help=False)
    stream.add_argument("--format", choices=("jsonl", "mot_csv"), help="stream format (default: by extension)")

    p = argparse.ArgumentParser(prog="railcom", description="Event-driven railway scene reasoning pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, fn: Callable[[argparse.Namespace], int], help: str, parents: Sequence = ()) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, parents=[common, *parents])
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", cmd_ingest, "parse and validate a detection stream", [stream])
    sp.add_argument("input")
    sp.add_argument("--out", help="canonical JSONL output (default stdout)")

    sp = add("track", cmd_track, "assign track ids", [stream])
    sp.add_argument("input")
    sp.add_argument("--out", help="tracked JSONL output (default stdout)")
    sp.add_argument("--tracks", metavar="PATH", help="also write the track table as JSON")

    sp = add("analyze", cmd_analyze, "annotate motion state per tracked object", [stream])
    sp.add_argument("input")
    sp.add_argument("--out")

    sp = add("log", cmd_log, "render the perception event log", [stream])
    sp.add_argument("input")
    sp.add_argument("--coalesce", action="store_true", help="merge runs of identical frames")
    sp.add_argument("--out")

    sp = add("sample", cmd_sample, "compute the keyframe sampling plan", [stream])
    sp.add_argument("input")
    sp.add_argument("--out")

    sp = add("calibrate", cmd_calibrate, "derive complexity thresholds from a set of streams", [stream])
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", help="config snippet output (default stdout)")

    sp = add("infer", cmd_infer, "run the full pipeline on scenario manifests")
    sp.add_argument("manifests", nargs="+")
    sp.add_argument("--mock", metavar="SCRIPT", help="answer from a mock script instead of the endpoint")
    sp.add_argument("--mock-sleep", action="store_true", help="actually wait for scripted mock latency")
    sp.add_argument("--jobs", type=int, metavar="N")
    sp.add_argument("--out", dest="out_dir", metavar="DIR")
    sp.add_argument("--coalesce", action="store_true")
    sp.add_argument("--no-defensive", action="store_true", help="never add the detector-unreliable block")
    sp.add_argument("--no-timestamp", action="store_true", help="omit generated_at from reports")

    sp = add("judge", cmd_judge, "score run reports with a judge model")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--references", required=True, metavar="PATH", help="JSON: scenario id -> reference(s)")
    sp.add_argument("--mock", metavar="SCRIPT")
    sp.add_argument("--jobs", type=int, metavar="N")
    sp.add_argument("--out", dest="out_dir", metavar="DIR")
    sp.add_argument("--invert-penalty", action="store_true", help="score penalty metrics as 11 - rating")

    sp = add("generate-qa", cmd_generate_qa, "generate QA records for images")
    sp.add_argument("images", nargs="+")
    sp.add_argument("--mock", metavar="SCRIPT")
    sp.add_argument("--jobs", type=int, metavar="N")
    sp.add_argument("--out", help="JSONL output (default stdout)")

    sp = add("synth", cmd_synth, "write a synthetic scenario (preset name or spec JSON)")
    sp.add_argument("spec", help=f"one of {', '.join(sorted(PRESETS))} or a spec file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--noise", type=float, help="centre jitter std in pixels")
    sp.add_argument("--out", dest="out_dir", metavar="DIR")

    sp = add("report", cmd_report, "compare run reports")
    sp.add_argument("--runs", nargs="+", required=True, metavar="LABEL=PATH")
    sp.add_argument("--json", metavar="OUT")
    sp.add_argument("--table", metavar="OUT")

    sp = add("config", cmd_config, "print the effective configuration")
    sp.add_argument("--out")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ConfigError, ManifestError) as exc:  # pragma: no cover - normally wrapped
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
