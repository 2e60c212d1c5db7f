"""Cross-run comparison tables for RunReport files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .evaluation import METRICS, RunReport, aggregate_scores, cq_accuracy, system_tps

# rows of the comparison table; integer rows are shown without decimals
SCORE_ROWS = ("stps", "cq_acc", "overall", *METRICS)
COUNT_ROWS = ("tokens", "latency_ms")
ROWS = SCORE_ROWS + COUNT_ROWS
DECIMALS = 2


class ReportError(ValueError):
    pass


def _round(x: float | int | None, row: str) -> float | int | None:
    if x is None:
        return None
    if row in COUNT_ROWS:
        return int(x)
    return round(float(x), DECIMALS) + 0.0  # +0.0 folds -0.0


@dataclass(frozen=True)
class RunSummary:
    label: str
    scenarios: tuple[str, ...]
    metrics: dict[str, float | int | None]


@dataclass(frozen=True)
class RunComparison:
    runs: tuple[RunSummary, ...]
    deltas: tuple[tuple[str, str, dict[str, float | int | None]], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "runs": [
                {"label": r.label, "scenarios": list(r.scenarios), "metrics": dict(r.metrics)} for r in self.runs
            ],
            "deltas": [{"from": a, "to": b, "metrics": dict(m)} for a, b, m in self.deltas],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        heads = ["metric"] + [r.label for r in self.runs] + [f"{b}-{a}" for a, b, _ in self.deltas]
        body = []
        for row in ROWS:
            cells = [row] + [_fmt(r.metrics[row], row) for r in self.runs]
            cells += [_fmt(m[row], row, signed=True) for _, _, m in self.deltas]
            body.append(cells)
        widths = [max(len(line[i]) for line in [heads] + body) for i in range(len(heads))]

        def line(cells: Sequence[str]) -> str:
            first = cells[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            return "  ".join([first, *rest]).rstrip()

        rule = "  ".join("-" * w for w in widths)
        return "\n".join([line(heads), rule, *(line(c) for c in body)]) + "\n"


def _fmt(v: float | int | None, row: str, signed: bool = False) -> str:
    if v is None:
        return "-"
    sign = "+" if signed else ""
    if row in COUNT_ROWS:
        return f"{int(v):{sign}d}"
    return f"{v:{sign}.{DECIMALS}f}"


def summarize(label: str, reports: Sequence[RunReport]) -> RunSummary:
    """Pool every question of every scenario in one labelled run."""
    if not reports:
        raise ReportError(f"run {label!r} has no reports")
    ids = [r.scenario for r in reports]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ReportError(f"run {label!r} lists scenario(s) more than once: {', '.join(dupes)}")
    tokens = sum(r.total_tokens for r in reports)
    latency = sum(r.total_latency_ms for r in reports)
    mc = [q for r in reports for q in r.questions if q.gold is not None]
    judged = [q.judge for r in reports for q in r.questions if q.judge is not None]
    invert = any(r.invert_penalty for r in reports)
    raw: dict[str, float | int | None] = {k: None for k in ROWS}
    raw["tokens"] = tokens
    raw["latency_ms"] = latency
    raw["stps"] = system_tps(tokens, latency) if latency > 0 else None
    if mc:
        raw["cq_acc"] = cq_accuracy([q.choice for q in mc], [q.gold for q in mc])
    if judged:
        dims, overall = aggregate_scores(judged, invert)
        raw["overall"] = overall
        raw.update(dims)
    return RunSummary(label, tuple(sorted(ids)), {k: _round(v, k) for k, v in raw.items()})


def compare_runs(runs: Sequence[tuple[str, Sequence[RunReport]]]) -> RunComparison:
    """Compare labelled runs; deltas are later minus earlier, pair by pair.

    Deltas are taken from the rounded per-run values, so each delta equals
    the difference of the two numbers printed beside it.
    """
    if len(runs) < 2:
        raise ReportError("need at least two runs to compare")
    labels = [label for label, _ in runs]
    if len(set(labels)) != len(labels):
        raise ReportError("run labels must be distinct")
    summaries = tuple(summarize(label, reps) for label, reps in runs)
    base = set(summaries[0].scenarios)
    for s in summaries[1:]:
        diff = base ^ set(s.scenarios)
        if diff:
            raise ReportError(
                f"runs {summaries[0].label!r} and {s.label!r} cover different scenarios: {', '.join(sorted(diff))}"
            )
    deltas = []
    for prev, cur in zip(summaries, summaries[1:]):
        d: dict[str, float | int | None] = {}
        for row in ROWS:
            a, b = prev.metrics[row], cur.metrics[row]
            d[row] = None if a is None or b is None else _round(b - a, row)
        deltas.append((prev.label, cur.label, d))
    return RunComparison(summaries, tuple(deltas))


def load_reports(path: str | Path) -> list[RunReport]:
    """A report file, a JSON array of reports, or a directory of ``*.report.json``."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.report.json"))
        if not files:
            raise ReportError(f"{path}: no *.report.json files")
        return [r for f in files for r in load_reports(f)]
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: invalid JSON ({exc.msg})") from None
    items = obj if isinstance(obj, list) else [obj]
    try:
        return [RunReport.from_dict(o) for o in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportError(f"{path}: not a run report ({exc})") from None


def parse_run_args(specs: Sequence[str]) -> list[tuple[str, Path]]:
    out = []
    for spec in specs:
        label, sep, p = spec.partition("=")
        if not sep or not label or not p:
            raise ReportError(f"run spec {spec!r} must look like label=path")
        out.append((label, Path(p)))
    return out


def compare_paths(specs: Mapping[str, str | Path] | Sequence[tuple[str, str | Path]]) -> RunComparison:
    pairs = list(specs.items()) if isinstance(specs, Mapping) else list(specs)
    return compare_runs([(label, load_reports(p)) for label, p in pairs])
