"""Workload traces, latency benchmarks and reports.

Trace file: one JSON object per line with keys ``request_id``, ``user_id``,
``arrival_ms`` and ``candidate_seed``, in arrival order.

Report file: CSV with header ``section,key,value``. Sections are ``summary``
(pipeline, mode, requests, avg_rt_ms, p50_rt_ms, p99_rt_ms, rt_variance,
max_qps), ``stage`` (mean virtual ms per stage, fixed stage order) and
``counter`` (sorted by name). A fixed-width table with the same numbers is
written next to it with a ``.txt`` suffix.

In virtual mode request latency is the pipeline's virtual latency. maxQPS
is the largest offered rate whose p99 latency, including queueing on
``workers`` servers, stays within the SLA; it is found by bisection with
arrivals rescaled from the trace. In wall mode requests run on a thread
pool, latency is measured with ``time.perf_counter`` and maxQPS is the
observed throughput.
"""
from __future__ import annotations

import csv
import heapq
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AIFConfig
from .pipeline import STAGES, Merger, Request

BASE_COUNTERS = (
    "aif_n2o_misses",
    "aif_user_forward",
    "sequential_user_forward",
    "sim_cache_hits",
    "sim_cache_misses",
    "user_cache_hits",
    "user_recomputes",
)
SUMMARY_FIELDS = ("pipeline", "mode", "requests", "avg_rt_ms", "p50_rt_ms", "p99_rt_ms",
                  "rt_variance", "max_qps")


# workload ----------------------------------------------------------------------------

def generate_workload(users: int, requests: int, seed: int, rate_qps: float = 50.0) -> list:
    if users < 1 or requests < 1:
        raise ValueError("users and requests must be positive")
    if rate_qps <= 0:
        raise ValueError("rate_qps must be positive")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1000.0 / rate_qps, size=requests)
    arrivals = np.cumsum(gaps)
    user_ids = rng.integers(0, users, size=requests)
    seeds = rng.integers(0, 2**31 - 1, size=requests)
    return [
        Request(f"req-{k:06d}", int(u), float(t), int(s))
        for k, (u, t, s) in enumerate(zip(user_ids, arrivals, seeds))
    ]


def write_trace(trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace:
            fh.write(json.dumps({"request_id": r.request_id, "user_id": r.user_id,
                                 "arrival_ms": r.arrival_ms, "candidate_seed": r.candidate_seed}))
            fh.write("\n")


def read_trace(path) -> list:
    out, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                req = Request(str(rec["request_id"]), int(rec["user_id"]),
                              float(rec["arrival_ms"]), int(rec["candidate_seed"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trace record ({exc})") from None
            if req.request_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate request_id {req.request_id!r}")
            seen.add(req.request_id)
            out.append(req)
    return out


# statistics ----------------------------------------------------------------------------

def percentile_nearest_rank(values, q: float) -> float:
    values = np.sort(np.asarray(values, dtype=np.float64))
    if not len(values):
        return 0.0
    rank = max(1, math.ceil(q / 100.0 * len(values)))
    return float(values[rank - 1])


def simulate_queue(arrivals_ms, service_ms, workers: int) -> np.ndarray:
    """Response times for FIFO service on ``workers`` identical servers."""
    free = [0.0] * workers
    out = np.empty(len(arrivals_ms))
    for k, (t, s) in enumerate(zip(arrivals_ms, service_ms)):
        start = max(t, heapq.heappop(free))
        heapq.heappush(free, start + s)
        out[k] = start + s - t
    return out


def offered_rate(arrivals_ms) -> float:
    arrivals_ms = np.asarray(arrivals_ms, dtype=np.float64)
    if len(arrivals_ms) < 2 or arrivals_ms[-1] <= arrivals_ms[0]:
        return 0.0
    return (len(arrivals_ms) - 1) * 1000.0 / (arrivals_ms[-1] - arrivals_ms[0])


def max_qps(arrivals_ms, service_ms, workers: int, sla_ms: float, iterations: int = 8) -> float:
    """Largest offered rate (bisection) with queued p99 within the SLA."""
    service_ms = np.asarray(service_ms, dtype=np.float64)
    if not len(service_ms) or percentile_nearest_rank(service_ms, 99) > sla_ms:
        return 0.0
    capacity = workers * 1000.0 / float(np.mean(service_ms))
    base = offered_rate(arrivals_ms)
    if base == 0.0:
        return capacity
    arrivals = np.asarray(arrivals_ms, dtype=np.float64) - arrivals_ms[0]
    # a finite trace can absorb a small overload, so never report more than capacity
    lo, hi = 0.0, capacity
    for _ in range(iterations):
        mid = (lo + hi) / 2
        lat = simulate_queue(arrivals * (base / mid), service_ms, workers)
        if percentile_nearest_rank(lat, 99) <= sla_ms:
            lo = mid
        else:
            hi = mid
    return lo


# benchmark -----------------------------------------------------------------------------

@dataclass
class LatencyReport:
    pipeline: str
    mode: str
    requests: int
    avg_rt_ms: float
    p50_rt_ms: float
    p99_rt_ms: float
    rt_variance: float
    max_qps: float
    stages: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    latencies: list = field(default_factory=list, repr=False)


def _summarize(pipeline, mode, latencies, stage_sums, counters, qps) -> LatencyReport:
    lat = np.asarray(latencies, dtype=np.float64)
    n = len(lat)
    stages = {s: (stage_sums.get(s, 0.0) / n if n else 0.0) for s in STAGES}
    merged = dict.fromkeys(BASE_COUNTERS, 0)
    merged.update(counters)
    return LatencyReport(
        pipeline, mode, n,
        float(lat.mean()) if n else 0.0,
        percentile_nearest_rank(lat, 50),
        percentile_nearest_rank(lat, 99),
        float(lat.var()) if n else 0.0,
        float(qps),
        stages,
        dict(sorted(merged.items())),
        lat.tolist(),
    )


def run_benchmark(trace, pipeline: str = "aif", mode: str = "virtual",
                  cfg: AIFConfig | None = None, merger: Merger | None = None,
                  precache: bool | None = None) -> LatencyReport:
    if pipeline not in ("sequential", "aif"):
        raise ValueError(f"unknown pipeline {pipeline!r}")
    if mode not in ("virtual", "wall"):
        raise ValueError(f"unknown mode {mode!r}")
    merger = merger or Merger(cfg or AIFConfig())
    cfg = merger.cfg
    trace = list(trace)

    def one(req, executor=None):
        if pipeline == "sequential":
            return merger.run_sequential(req)
        return merger.run_aif(req, precache=precache, executor=executor)

    stage_sums = dict.fromkeys(STAGES, 0.0)
    latencies = []
    if mode == "virtual":
        for req in trace:
            _, lat = one(req)
            latencies.append(lat.total_ms)
            for s, v in lat.stages.items():
                stage_sums[s] += v
        qps = max_qps([r.arrival_ms for r in trace], latencies, cfg.workers,
                      cfg.sla_p99_ms, cfg.qps_search_iterations)
    else:
        inner = ThreadPoolExecutor(max_workers=2 * cfg.workers) if pipeline == "aif" else None

        def timed(req):
            t0 = time.perf_counter()
            _, lat = one(req, inner)
            return (time.perf_counter() - t0) * 1000.0, lat

        t0 = time.perf_counter()
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(timed, trace))
        elapsed = time.perf_counter() - t0
        if inner is not None:
            inner.shutdown()
        for ms, lat in results:
            latencies.append(ms)
            for s, v in lat.stages.items():
                stage_sums[s] += v
        qps = len(trace) / elapsed if elapsed > 0 and trace else 0.0
    return _summarize(pipeline, mode, latencies, stage_sums, merger.counters(), qps)


# report files ----------------------------------------------------------------------------

def _rows(report: LatencyReport):
    for name in SUMMARY_FIELDS:
        yield "summary", name, getattr(report, name)
    for s in STAGES:
        yield "stage", s, report.stages.get(s, 0.0)
    for k, v in sorted(report.counters.items()):
        yield "counter", k, v


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def render_table(report: LatencyReport) -> str:
    rows = list(_rows(report))
    width = max(len(f"{sec}.{key}") for sec, key, _ in rows)
    lines = [f"{'metric':<{width}}  value", "-" * (width + 14)]
    for sec, key, value in rows:
        shown = f"{value:.4f}" if isinstance(value, float) else str(value)
        lines.append(f"{sec + '.' + key:<{width}}  {shown}")
    return "\n".join(lines) + "\n"


def emit_report(report: LatencyReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["section", "key", "value"])
        for sec, key, value in _rows(report):
            writer.writerow([sec, key, _fmt(value)])
    path.with_suffix(".txt").write_text(render_table(report), encoding="utf-8")
    return path


def parse_report(path) -> LatencyReport:
    summary, stages, counters = {}, {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["section", "key", "value"]:
            raise ValueError(f"{path}: not a latency report")
        for sec, key, value in reader:
            if sec == "summary":
                summary[key] = value
            elif sec == "stage":
                stages[key] = float(value)
            elif sec == "counter":
                counters[key] = int(value)
            else:
                raise ValueError(f"{path}: unknown section {sec!r}")
    return LatencyReport(
        summary["pipeline"], summary["mode"], int(summary["requests"]),
        float(summary["avg_rt_ms"]), float(summary["p50_rt_ms"]), float(summary["p99_rt_ms"]),
        float(summary["rt_variance"]), float(summary["max_qps"]), stages, counters,
    )
