"""Batch execution, CSV traces, summaries and plot data.

A trace file is a CSV with a ``#``-prefixed header block echoing the run id,
seed and the full configuration, then one row per epoch::

    # agectl trace v1
    # run_id = acp-kappa-0.1-s1
    # seed = 1
    # cfg policy.kind = acp
    # cfg ...
    run_id,policy,k,t_start_ns,...

Feeding the ``# cfg`` lines back through :func:`agectl.config.from_items` and
re-running the seed reproduces the file byte for byte.
"""

from __future__ import annotations

import bisect
import csv
import io
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .config import ExperimentConfig, dumps, from_items, parse_lines, to_items
from .netsim import Recovery, SimResult, issue3_scenario, run_simulation
from .policies import Action
from .sender import EpochRecord

log = logging.getLogger(__name__)

MAGIC_LINE = "# agectl trace v1"
CFG_PREFIX = "# cfg "
COLUMNS = (
    "run_id", "policy", "k", "t_start_ns", "t_end_ns", "avg_age_ns", "peak_age_ns",
    "avg_backlog", "lambda", "epoch_len_ns", "action", "rtt_bar_ns", "z_bar_ns",
    "clamped", "zeta", "monitor_age_ns",
)
# monitor_age_ns is only known in simulation; live traces leave it empty
REQUIRED_COLUMNS = COLUMNS[:-1]
CDF_POINTS = 1000
DEFAULT_KAPPAS = (0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0)


class TraceSchemaError(ValueError):
    """A trace file that does not have the expected columns or values."""


@dataclass(frozen=True)
class TraceRow:
    run_id: str
    policy: str
    k: int
    t_start_ns: int
    t_end_ns: int
    avg_age_ns: float
    peak_age_ns: int
    avg_backlog: float
    lam: float
    epoch_len_ns: int
    action: str  # empty for policies without a decision table
    rtt_bar_ns: float
    z_bar_ns: float
    clamped: bool
    zeta: int
    monitor_age_ns: Optional[float] = None

    @classmethod
    def from_record(cls, run_id: str, policy: str, rec: EpochRecord,
                    monitor_age: Optional[float] = None) -> "TraceRow":
        return cls(
            run_id, policy, rec.k, rec.t_start, rec.t_end, float(rec.avg_age), rec.peak_age,
            float(rec.avg_backlog), rec.lam, rec.epoch_len,
            "" if rec.action is None else str(rec.action),
            rec.rtt_bar, rec.z_bar, rec.clamped, rec.zeta,
            None if monitor_age is None else float(monitor_age),
        )

    def cells(self) -> list[str]:
        return [
            self.run_id, self.policy, str(self.k), str(self.t_start_ns), str(self.t_end_ns),
            repr(self.avg_age_ns), str(self.peak_age_ns), repr(self.avg_backlog), repr(self.lam),
            str(self.epoch_len_ns), self.action, repr(self.rtt_bar_ns), repr(self.z_bar_ns),
            "1" if self.clamped else "0", str(self.zeta),
            "" if self.monitor_age_ns is None else repr(self.monitor_age_ns),
        ]

    @property
    def parsed_action(self) -> Optional[Action]:
        return Action.parse(self.action) if self.action else None


_PARSERS = {
    "k": int, "t_start_ns": int, "t_end_ns": int, "avg_age_ns": float, "peak_age_ns": int,
    "avg_backlog": float, "lambda": float, "epoch_len_ns": int, "rtt_bar_ns": float,
    "z_bar_ns": float, "zeta": int,
}


def _parse_bool_cell(text: str) -> bool:
    if text not in ("0", "1"):
        raise ValueError(f"expected 0 or 1, got {text!r}")
    return text == "1"


def _row_from_dict(d: Mapping[str, str], line: int) -> TraceRow:
    vals = {}
    for col in REQUIRED_COLUMNS:
        raw = d[col]
        try:
            if col == "clamped":
                vals[col] = _parse_bool_cell(raw)
            elif col == "action":
                if raw:
                    Action.parse(raw)
                vals[col] = raw
            else:
                vals[col] = _PARSERS.get(col, str)(raw)
        except ValueError as exc:
            raise TraceSchemaError(f"line {line}: bad value in column {col!r}: {exc}") from exc
    mon = d.get("monitor_age_ns") or None
    try:
        monitor = float(mon) if mon is not None else None
    except ValueError as exc:
        raise TraceSchemaError(f"line {line}: bad value in column 'monitor_age_ns': {exc}") from exc
    vals["lam"] = vals.pop("lambda")
    return TraceRow(monitor_age_ns=monitor, **vals)


# -- trace files -------------------------------------------------------------

@dataclass
class Trace:
    run_id: str
    seed: Optional[int]
    config: Optional[ExperimentConfig]
    rows: list[TraceRow]
    meta: dict[str, str] = field(default_factory=dict)


def render_trace(rows: Sequence[TraceRow], config: Optional[ExperimentConfig], seed: Optional[int],
                 run_id: str, meta: Optional[Mapping[str, str]] = None) -> str:
    buf = io.StringIO()
    buf.write(MAGIC_LINE + "\n")
    buf.write(f"# run_id = {run_id}\n")
    buf.write(f"# seed = {'' if seed is None else seed}\n")
    for key, value in (meta or {}).items():
        buf.write(f"# {key} = {value}\n")
    if config is not None:
        for key, value in to_items(config).items():
            buf.write(f"{CFG_PREFIX}{key} = {value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue()


def write_trace(path: str | Path, rows: Sequence[TraceRow], config: Optional[ExperimentConfig],
                seed: Optional[int], run_id: str, meta: Optional[Mapping[str, str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_trace(rows, config, seed, run_id, meta))
    return path


def parse_trace(text: str, source: str = "<trace>") -> Trace:
    lines = text.splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    meta: dict[str, str] = {}
    for ln in header:
        if ln.startswith(CFG_PREFIX) or ln == MAGIC_LINE or "=" not in ln:
            continue
        key, value = ln[1:].split("=", 1)
        meta[key.strip()] = value.strip()
    cfg_items = parse_lines(header, prefix=CFG_PREFIX)
    config = from_items(cfg_items) if cfg_items else None
    if not body:
        raise TraceSchemaError(f"{source}: missing column-name row")
    reader = csv.DictReader(body)
    names = reader.fieldnames or []
    for col in REQUIRED_COLUMNS:
        if col not in names:
            raise TraceSchemaError(f"{source}: missing column {col!r}")
    unknown = [c for c in names if c not in COLUMNS]
    if unknown:
        raise TraceSchemaError(f"{source}: unexpected column {unknown[0]!r}")
    n_header = len(header) + 1
    rows = [_row_from_dict(d, n_header + i + 1) for i, d in enumerate(reader)]
    seed_text = meta.pop("seed", "")
    return Trace(meta.pop("run_id", source), int(seed_text) if seed_text else None, config, rows, meta)


def read_trace(path: str | Path) -> Trace:
    path = Path(path)
    return parse_trace(path.read_text(), str(path))


def trace_rows(result: SimResult, run_id: str) -> list[TraceRow]:
    policy = result.config.policy.kind.value
    monitor = result.monitor_epoch_ages
    return [
        TraceRow.from_record(run_id, policy, rec, monitor[i] if i < len(monitor) else None)
        for i, rec in enumerate(result.records)
    ]


def simulate_to_text(config: ExperimentConfig, seed: int, run_id: str) -> tuple[str, SimResult]:
    result = run_simulation(config, seed)
    return render_trace(trace_rows(result, run_id), config, seed, run_id), result


def reproduce(path: str | Path) -> str:
    """Re-run a simulated trace from its embedded config and seed; returns the new file text."""
    trace = read_trace(path)
    if trace.config is None or trace.seed is None:
        raise TraceSchemaError(f"{path}: no embedded config/seed to reproduce from")
    text, _ = simulate_to_text(trace.config, trace.seed, trace.run_id)
    return text


# -- statistics --------------------------------------------------------------

def quantile_cdf(values: Sequence[float], points: int = CDF_POINTS) -> list[tuple[float, float]]:
    """Empirical CDF sampled at ``points`` evenly spaced probabilities in [0, 1].

    Each pair is (x, p) where x is the smallest observed value whose empirical
    CDF reaches p.
    """
    if not values:
        return []
    srt = sorted(values)
    n = len(srt)
    out = []
    for i in range(points):
        p = i / (points - 1) if points > 1 else 1.0
        idx = max(0, math.ceil(p * n) - 1)
        out.append((srt[idx], p))
    return out


def ecdf(values: Sequence[float], x: float) -> float:
    srt = sorted(values)
    return bisect.bisect_right(srt, x) / len(srt) if srt else 0.0


@dataclass(frozen=True)
class RunStats:
    run_id: str
    seed: Optional[int]
    epochs: int
    mean_age_ns: float  # epoch-length weighted
    mean_age_unweighted_ns: float
    var_age_ns2: float
    clamp_fraction: float
    violations: int
    mean_backlog: float


@dataclass
class SummaryStats:
    cell: str
    epochs: int
    mean_age_ns: float  # weighted by epoch length, the exact session time average
    mean_age_unweighted_ns: float
    median_age_ns: float
    var_age_ns2: float
    clamp_fraction: float
    violations: int
    threshold_ns: int
    age_cdf: list[tuple[float, float]]
    rtt_cdf: list[tuple[float, float]]
    runs: list[RunStats]
    series: dict[str, list[tuple[int, float]]]  # run_id -> (t_end_ns, avg_age_ns)


def _var(xs: Sequence[float]) -> float:
    return statistics.variance(xs) if len(xs) > 1 else 0.0


def _weighted_mean(rows: Sequence[TraceRow]) -> float:
    total = sum(r.epoch_len_ns for r in rows)
    if total == 0:
        return statistics.fmean(r.avg_age_ns for r in rows)
    return math.fsum(r.avg_age_ns * r.epoch_len_ns for r in rows) / total


def _clamp_fraction(rows: Sequence[TraceRow]) -> float:
    updates = [r for r in rows if r.action]
    return sum(r.clamped for r in updates) / len(updates) if updates else 0.0


def summarize_traces(traces: Sequence[Trace], cell: str = "cell",
                     threshold_ns: Optional[int] = None) -> SummaryStats:
    rows = [r for t in traces for r in t.rows]
    if not rows:
        raise TraceSchemaError(f"{cell}: no epoch rows to summarize")
    if threshold_ns is None:
        cfg = next((t.config for t in traces if t.config is not None), None)
        threshold_ns = cfg.policy.peak_age_threshold_ns if cfg else 200_000_000
    ages = [r.avg_age_ns for r in rows]
    runs = []
    series = {}
    for t in traces:
        if not t.rows:
            continue
        a = [r.avg_age_ns for r in t.rows]
        runs.append(RunStats(
            t.run_id, t.seed, len(a), _weighted_mean(t.rows), statistics.fmean(a), _var(a),
            _clamp_fraction(t.rows), sum(x > threshold_ns for x in a),
            math.fsum(r.avg_backlog * r.epoch_len_ns for r in t.rows)
            / max(1, sum(r.epoch_len_ns for r in t.rows)),
        ))
        series[t.run_id] = [(r.t_end_ns, r.avg_age_ns) for r in t.rows]
    return SummaryStats(
        cell=cell,
        epochs=len(rows),
        mean_age_ns=_weighted_mean(rows),
        mean_age_unweighted_ns=statistics.fmean(ages),
        median_age_ns=statistics.median(ages),
        var_age_ns2=_var(ages),
        clamp_fraction=_clamp_fraction(rows),
        violations=sum(a > threshold_ns for a in ages),
        threshold_ns=threshold_ns,
        age_cdf=quantile_cdf(ages),
        rtt_cdf=quantile_cdf([r.rtt_bar_ns for r in rows]),
        runs=runs,
        series=series,
    )


def summarize(paths: Iterable[str | Path], cell: str = "cell",
              threshold_ns: Optional[int] = None) -> SummaryStats:
    return summarize_traces([read_trace(p) for p in paths], cell, threshold_ns)


SUMMARY_SCALARS = ("epochs", "mean_age_ns", "mean_age_unweighted_ns", "median_age_ns",
                   "var_age_ns2", "clamp_fraction", "violations", "threshold_ns")


def render_summary(stats: SummaryStats) -> str:
    out = [f"cell = {stats.cell}"]
    for key in SUMMARY_SCALARS:
        value = getattr(stats, key)
        out.append(f"{key} = {value!r}")
    for r in stats.runs:
        out.append(f"run {r.run_id} seed={r.seed} epochs={r.epochs} mean_age_ns={r.mean_age_ns!r} "
                   f"var_age_ns2={r.var_age_ns2!r} clamp_fraction={r.clamp_fraction!r} "
                   f"violations={r.violations}")
    return "\n".join(out) + "\n"


def read_summary(text: str) -> dict[str, float | int | str]:
    """Scalar fields back from :func:`render_summary` output."""
    out: dict[str, float | int | str] = {}
    for line in text.splitlines():
        if line.startswith("run ") or "=" not in line:
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "cell":
            out[key] = value
        elif key in ("epochs", "violations", "threshold_ns"):
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


# -- plot data ---------------------------------------------------------------

def _write_xy(path: Path, pairs: Iterable[tuple[float, float]], header: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"# {header}\n")
        for x, y in pairs:
            fh.write(f"{x!r} {y!r}\n")
    return path


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.+" else "_" for c in name)


def emit_plot_data(stats, kind: str, out_dir: str | Path, name: Optional[str] = None) -> list[Path]:
    """Write two-column ``x y`` text files, one per curve.

    ``cdf`` and ``trace`` take one :class:`SummaryStats`; ``sweep`` takes a
    mapping from parameter value to :class:`SummaryStats` and writes one point
    (value, weighted mean age in ms) per cell.
    """
    out = Path(out_dir)
    if kind == "cdf":
        base = _safe(name or stats.cell)
        return [
            _write_xy(out / f"{base}-age-cdf.dat", ((x / 1e6, p) for x, p in stats.age_cdf),
                      "avg_age_ms cdf"),
            _write_xy(out / f"{base}-rtt-cdf.dat", ((x / 1e6, p) for x, p in stats.rtt_cdf),
                      "rtt_bar_ms cdf"),
        ]
    if kind == "trace":
        return [
            _write_xy(out / f"{_safe(run_id)}-trace.dat",
                      ((t / 1e9, a / 1e6) for t, a in pts), "t_s avg_age_ms")
            for run_id, pts in stats.series.items()
        ]
    if kind == "sweep":
        pts = sorted((float(v), s.mean_age_ns / 1e6) for v, s in stats.items())
        return [_write_xy(out / f"{_safe(name or 'sweep')}-sweep.dat", pts, "param mean_age_ms")]
    raise ValueError(f"unknown plot kind {kind!r}; expected cdf, trace or sweep")


# -- experiment matrix -------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    name: str
    config: ExperimentConfig


@dataclass
class CellResult:
    name: str
    traces: list[Path] = field(default_factory=list)
    summary: Optional[SummaryStats] = None
    summary_path: Optional[Path] = None
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _run_one(config: ExperimentConfig, seed: int, run_id: str, path: Path) -> Path:
    text, _ = simulate_to_text(config, seed, run_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def run_matrix(cells: Sequence[Cell], out_dir: str | Path, workers: int = 1) -> dict[str, CellResult]:
    """Run every (cell, seed) pair, writing one trace per run and one summary per cell.

    A failing run is recorded on its cell and the rest of the matrix carries
    on. Runs are independent, so ``workers > 1`` farms them out to processes.
    """
    out = Path(out_dir)
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ValueError("cell names must be unique; they name the output directories")
    results = {c.name: CellResult(c.name) for c in cells}
    jobs = [
        (c, seed, f"{c.name}-s{seed}", out / _safe(c.name) / f"{_safe(c.name)}-s{seed}.csv")
        for c in cells for seed in c.config.run_seeds()
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, c.config, seed, rid, p) for c, seed, rid, p in jobs]
            outcomes = []
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # recorded per cell below
                    outcomes.append(exc)
    else:
        outcomes = []
        for c, seed, rid, p in jobs:
            try:
                outcomes.append(_run_one(c.config, seed, rid, p))
            except Exception as exc:
                outcomes.append(exc)
    for (c, seed, rid, _), outcome in zip(jobs, outcomes):
        if isinstance(outcome, Exception):
            log.warning("run %s failed: %s", rid, outcome)
            results[c.name].errors.append(f"{rid}: {type(outcome).__name__}: {outcome}")
        else:
            results[c.name].traces.append(outcome)
    for c in cells:
        res = results[c.name]
        if not res.traces:
            continue
        try:
            res.summary = summarize(res.traces, c.name)
        except TraceSchemaError as exc:
            res.errors.append(f"summary: {exc}")
            continue
        res.summary_path = out / _safe(c.name) / "summary.txt"
        res.summary_path.write_text(render_summary(res.summary))
    return results


# -- experiment presets ------------------------------------------------------

def kappa_sweep_cells(values: Sequence[float] = DEFAULT_KAPPAS, runs: int = 5,
                      base: Optional[ExperimentConfig] = None) -> list[Cell]:
    base = base or ExperimentConfig()
    return [
        Cell(f"acp-kappa-{v:g}", base.replace(**{"policy.kind": "acp", "policy.kappa": float(v),
                                                 "runs": runs, "label": f"kappa={v:g}"}))
        for v in values
    ]


def acpplus_cells(multipliers: Sequence[int] = (10, 30), runs: int = 5,
                  base: Optional[ExperimentConfig] = None) -> list[Cell]:
    """Original and modified ACP+ at each epoch multiplier (the T10/T30 grid)."""
    base = base or ExperimentConfig()
    cells = []
    for m in multipliers:
        for kind in ("acp+", "acp+mod"):
            cells.append(Cell(f"{kind}-T{m}", base.replace(**{
                "policy.kind": kind, "policy.epoch_multiplier": m, "runs": runs,
                "label": f"{kind} T{m}"})))
    return cells


# Scripted fault episode used by the feedback experiment: a lazy sender meets a
# minute-long coalescing fault 20 s in. Three-packet holds with a 500 ms flush
# are harsh enough to push the average age over 200 ms without feedback.
FEEDBACK_SCENARIO = {
    "policy.kind": "lazy",
    "fault.start_ns": "20s",
    "fault.duration_ns": "60s",
    "fault.hold_count": 3,
    "fault.flush_timeout_ns": "500ms",
    "fault.enabled": False,
    "max_sim_time_ns": "200s",
}


def feedback_config(threshold_ns: int = 200_000_000, feedback: bool = True,
                    base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    return base.replace(**FEEDBACK_SCENARIO, **{
        "policy.feedback": feedback, "policy.peak_age_threshold_ns": threshold_ns})


@dataclass(frozen=True)
class FeedbackComparison:
    seed: int
    without: Recovery
    with_feedback: Recovery
    rtt_at_violation_without: Optional[float]
    rtt_at_violation_with: Optional[float]

    @property
    def rtt_lowered(self) -> bool:
        a, b = self.rtt_at_violation_without, self.rtt_at_violation_with
        return a is not None and b is not None and b < a

    @property
    def recovers_sooner(self) -> bool:
        a, b = self.without.epochs, self.with_feedback.epochs
        return b is not None and (a is None or b < a)


def feedback_comparison(seed: int, threshold_ns: int = 200_000_000,
                        base: Optional[ExperimentConfig] = None,
                        out_dir: Optional[str | Path] = None) -> FeedbackComparison:
    """Run the fault scenario with and without feedback for one seed.

    Both runs are identical until the first violation closes, so the R̄TT
    recorded for that epoch isolates the effect of the feedback rule.
    """
    outcomes = {}
    for fb in (False, True):
        cfg = feedback_config(threshold_ns, fb, base)
        result, rec = issue3_scenario(cfg, seed)
        outcomes[fb] = (result, rec)
        if out_dir is not None:
            tag = "feedback" if fb else "baseline"
            rid = f"{tag}-s{seed}"
            write_trace(Path(out_dir) / f"{rid}.csv", trace_rows(result, rid), cfg, seed, rid)
    (r0, c0), (r1, c1) = outcomes[False], outcomes[True]
    fv = c0.first_violation
    a = r0.records[fv].rtt_bar if fv is not None else None
    b = r1.records[fv].rtt_bar if fv is not None and fv < len(r1.records) else None
    return FeedbackComparison(seed, c0, c1, a, b)


def feedback_test(threshold_ns: int, out_dir: str | Path, seeds: Sequence[int] = (1, 2, 3, 4, 5),
                  base: Optional[ExperimentConfig] = None) -> list[FeedbackComparison]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    comps = [feedback_comparison(s, threshold_ns, base, out) for s in seeds]
    lines = ["seed rtt_without_ns rtt_with_ns recovery_epochs_without recovery_epochs_with "
             "recovery_ns_without recovery_ns_with"]
    for c in comps:
        lines.append(" ".join(str(v) for v in (
            c.seed, c.rtt_at_violation_without, c.rtt_at_violation_with,
            c.without.epochs, c.with_feedback.epochs, c.without.time_ns, c.with_feedback.time_ns)))
    (out / "recovery.txt").write_text("\n".join(lines) + "\n")
    (out / "scenario.cfg").write_text(dumps(feedback_config(threshold_ns, True, base)))
    return comps
