"""Error statistics, run manifests and multi-mode comparisons."""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import EmptySeries, EstimationError, NegativeInput, NonFiniteData
from .io import dumps_json, write_rows
from .pipeline import PipelineConfig, collect_residuals, make_graph, measurement_groups, parse_mode, run
from .scenario import ScenarioConfig, generate, oracle_error


@dataclass(frozen=True)
class ErrorSummary:
    median: float
    variance: float
    max: float
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(errors) -> ErrorSummary:
    """Median (lower middle for even counts), unbiased variance and maximum."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptySeries("cannot summarise an empty error series")
    if not np.all(np.isfinite(e)):
        raise NonFiniteData("error series contains non-finite values")
    if np.any(e < 0):
        raise NegativeInput("error magnitudes must be non-negative")
    s = np.sort(e)
    median = float(s[(s.size - 1) // 2])
    variance = float(np.var(s, ddof=1)) if s.size > 1 else 0.0
    return ErrorSummary(median, variance, float(s[-1]), int(s.size))


def canonical_json(obj) -> str:
    return json.dumps(json.loads(dumps_json(obj)), sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """sha256 of the canonical (sorted, compact) JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _now() -> str:
    # SOURCE_DATE_EPOCH pins the clock for reproducible output
    stamp = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(stamp) if stamp else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    scenario_hash: str
    pipeline: dict
    seeds: list[int]
    version: str = __version__
    timestamps: dict = field(default_factory=dict)

    @classmethod
    def create(cls, scenario: ScenarioConfig | dict, pipeline: PipelineConfig | dict, seeds) -> "RunManifest":
        sc = scenario.to_dict() if hasattr(scenario, "to_dict") else dict(scenario)
        sc.pop("seed", None)  # seeds are listed separately
        pc = pipeline.to_dict() if hasattr(pipeline, "to_dict") else dict(pipeline)
        return cls(config_hash(sc), json.loads(dumps_json(pc)), [int(s) for s in seeds], __version__, {"created": _now()})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(**data)


def _thread_cap() -> int:
    raw = os.environ.get("ROBUST_BCE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"ROBUST_BCE_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ValueError("ROBUST_BCE_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass
class RunResult:
    mode: str
    seed: int
    status: str  # "ok" or "failed: <reason>"
    errors: list[float] = field(default_factory=list)
    trace: dict | None = None
    features: list[tuple] = field(default_factory=list)
    scatter: list[tuple] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _run_one(job) -> RunResult:
    scenario_cfg, pipeline_cfg, mode, seed = job
    try:
        sc_dict = scenario_cfg.to_dict()
        sc_dict["seed"] = seed
        scenario = generate(ScenarioConfig(**sc_dict))
        pc_dict = pipeline_cfg.to_dict()
        pc_dict["mode"] = mode
        config = PipelineConfig(**pc_dict)
        X, trace = run(scenario.observations, config, n_epochs=scenario.truth.n_epochs)
        errors = oracle_error(scenario.truth, X).tolist()
        features, scatter = [], []
        if mode == "BCE_AD":
            for rec in trace.iterations:
                for kind in sorted(rec.scores):
                    for name, score in rec.scores[kind].items():
                        features.append((seed, kind, rec.iteration, name, float(score), int(name in rec.selected[kind])))
        if mode in ("BCE", "BCE_AD") and trace.iterations:
            last = trace.iterations[-1]
            graph = make_graph(scenario.observations, config, scenario.truth.n_epochs)
            for kind, idx in measurement_groups(graph).items():
                res = collect_residuals(graph, X, idx).residuals
                for r, (row, label) in enumerate(zip(res, last.assignments[kind])):
                    cells = [float(v) for v in row] + [""] * (2 - len(row))
                    scatter.append((mode, seed, kind, r, *cells, int(label)))
        return RunResult(mode, seed, "ok", errors, trace.to_dict(), features, scatter)
    except (EstimationError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        reason = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return RunResult(mode, seed, f"failed: {reason}")


@dataclass
class Comparison:
    summaries: dict[str, ErrorSummary | None]
    per_seed: dict[tuple[str, int], ErrorSummary | None]
    runs: list[RunResult]
    manifest: RunManifest

    def median_of_medians(self, mode: str) -> float:
        meds = [s.median for (m, _), s in self.per_seed.items() if m == mode and s is not None]
        if not meds:
            raise EmptySeries(f"no successful runs for mode {mode}")
        return float(np.median(meds))


def compare(
    scenario: ScenarioConfig,
    modes: Sequence[str],
    seeds: Sequence[int],
    pipeline: PipelineConfig | None = None,
    out: str | os.PathLike | None = None,
    workers: int | None = None,
) -> Comparison:
    """Run every (mode, seed) pair and summarise per-epoch horizontal errors.

    Failed runs are reported with a ``failed: ...`` status and never get a
    summary.  With ``out`` set, the CSV tables, per-run traces and the
    manifest are written there; rows are flushed as each run completes in
    (seed, mode) order, so partial results survive an interruption.
    """
    modes = [parse_mode(m) for m in modes]
    seeds = [int(s) for s in seeds]
    if not modes or not seeds:
        raise ValueError("compare needs at least one mode and one seed")
    pipeline = pipeline or PipelineConfig()
    jobs = [(scenario, pipeline, m, s) for s in seeds for m in modes]
    workers = min(workers or _thread_cap(), len(jobs))
    manifest = RunManifest.create(scenario, pipeline, seeds)

    files = None
    if out is not None:
        out = Path(out)
        (out / "traces").mkdir(parents=True, exist_ok=True)
        files = {
            "errors": open(out / "errors.csv", "w", newline=""),
            "runs": open(out / "runs.csv", "w", newline=""),
        }
        files["errors"].write("mode,seed,epoch,error\n")
        files["runs"].write("mode,seed,status\n")

    runs: list[RunResult] = []
    try:
        if workers > 1:
            pool = ProcessPoolExecutor(max_workers=workers)
            results = pool.map(_run_one, jobs)
        else:
            pool = None
            results = map(_run_one, jobs)
        for res in results:
            runs.append(res)
            if files is not None:
                files["runs"].write(f"{res.mode},{res.seed},{json.dumps(res.status)}\n")
                for e, err in enumerate(res.errors):
                    files["errors"].write(f"{res.mode},{res.seed},{e},{err!r}\n")
                if res.trace is not None:
                    (out / "traces" / f"{res.mode}_seed{res.seed}.json").write_text(dumps_json(res.trace))
                for fh in files.values():
                    fh.flush()
        if pool is not None:
            pool.shutdown()
    finally:
        if files is not None:
            for fh in files.values():
                fh.close()

    per_seed = {(r.mode, r.seed): summarize(r.errors) if r.ok else None for r in runs}
    summaries = {}
    for m in modes:
        pooled = [e for r in runs if r.mode == m and r.ok for e in r.errors]
        summaries[m] = summarize(pooled) if pooled else None
    result = Comparison(summaries, per_seed, runs, manifest)

    if out is not None:
        rows = []
        for m in modes:
            for r in (r for r in runs if r.mode == m):
                s = per_seed[(m, r.seed)]
                rows.append(_summary_row(m, str(r.seed), r.status, s))
            failed = [r for r in runs if r.mode == m and not r.ok]
            status = "ok" if not failed else f"partial: {len(failed)} failed"
            if summaries[m] is None:
                status = "failed"
            rows.append(_summary_row(m, "all", status, summaries[m]))
        write_rows(out / "summary.csv", ["mode", "seed", "status", "median", "variance", "max", "count"], rows)
        write_rows(
            out / "feature_usage.csv",
            ["seed", "kind", "iteration", "feature", "score", "selected"],
            [f for r in runs for f in r.features],
        )
        write_rows(
            out / "assignments.csv",
            ["mode", "seed", "kind", "row", "r0", "r1", "assignment"],
            [s for r in runs for s in r.scatter],
        )
        (out / "manifest.json").write_text(dumps_json(manifest.to_dict()))
    return result


def _summary_row(mode: str, seed: str, status: str, s: ErrorSummary | None) -> list:
    if s is None:
        return [mode, seed, status, "", "", "", ""]
    return [mode, seed, status, s.median, s.variance, s.max, s.count]
