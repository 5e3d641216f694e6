"""Weak-scaling benchmark: N delay-model backends behind the balancer, N client workers."""

from __future__ import annotations

import contextlib
import csv
import subprocess
import sys
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np

from .balancer import BalancerConfig, run_balancer
from .client import RemoteModel

CSV_FIELDS = [
    "scenario", "backends", "requests_per_worker", "delay_ms", "makespan_s", "ideal_s",
    "efficiency", "clamped", "p50_ms", "p90_ms", "p99_ms", "max_ms", "status",
]
MAX_EFFICIENCY = 1.05


@dataclass
class BenchReport:
    scenario: str
    backends: int
    requests_per_worker: int
    delay_ms: float
    makespan_s: float = float("nan")
    ideal_s: float = float("nan")
    efficiency: float = float("nan")
    clamped: bool = False
    p50_ms: float = float("nan")
    p90_ms: float = float("nan")
    p99_ms: float = float("nan")
    max_ms: float = float("nan")
    status: str = "ok"


def efficiency(ideal: float, actual: float) -> tuple[float, bool]:
    """ideal/actual, clamped to 1.05 (flagged) to absorb timer noise; 1.0 when there is no ideal."""
    if ideal <= 0:
        return 1.0, True
    eff = ideal / actual
    if eff > MAX_EFFICIENCY:
        return MAX_EFFICIENCY, True
    return eff, False


@contextlib.contextmanager
def spawn_backends(count: int, delay_ms: float, startup_timeout: float = 60.0):
    """Start *count* delay-model servers as local processes; yields their URLs."""
    cmd = [sys.executable, "-m", "modelbridge", "serve", "--model", "delay",
           "--delay-ms", str(delay_ms), "--port", "0"]
    procs = [subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True) for _ in range(count)]
    try:
        urls = []
        deadline = time.monotonic() + startup_timeout
        for proc in procs:
            line = proc.stdout.readline()
            if not line.startswith("READY port=") or time.monotonic() > deadline:
                raise RuntimeError(f"backend failed to start (got {line!r})")
            urls.append(f"http://127.0.0.1:{int(line.split('=', 1)[1])}")
        yield urls
    finally:
        for proc in procs:
            proc.terminate()
        for proc in procs:
            try:
                proc.wait(5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
            proc.stdout.close()


def run_workers(url: str, workers: int, requests_per_worker: int, model_name: str = "forward"):
    """Each worker sends its requests back to back; returns (makespan, latencies in seconds)."""
    models = [RemoteModel(url, model_name) for _ in range(workers)]
    latencies: list[list[float]] = [[] for _ in range(workers)]
    errors: list[BaseException] = []
    barrier = threading.Barrier(workers + 1)

    def work(i: int) -> None:
        barrier.wait()
        try:
            for _ in range(requests_per_worker):
                t0 = time.perf_counter()
                models[i]([[1.0]])
                latencies[i].append(time.perf_counter() - t0)
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(workers)]
    for t in threads:
        t.start()
    barrier.wait()
    start = time.perf_counter()
    for t in threads:
        t.join()
    makespan = time.perf_counter() - start
    if errors:
        raise errors[0]
    return makespan, [x for lat in latencies for x in lat]


def bench_step(urls, requests_per_worker: int, delay_ms: float, scenario: str = "weak-scaling",
               health_interval: float = 5.0) -> BenchReport:
    report = BenchReport(scenario, len(urls), requests_per_worker, delay_ms)
    with run_balancer(BalancerConfig(urls, health_interval=health_interval)) as balancer:
        makespan, lat = run_workers(balancer.url, len(urls), requests_per_worker)
    lat_ms = np.array(lat) * 1000.0
    report.makespan_s = makespan
    report.ideal_s = requests_per_worker * delay_ms / 1000.0
    report.efficiency, report.clamped = efficiency(report.ideal_s, makespan)
    report.p50_ms, report.p90_ms, report.p99_ms = np.percentile(lat_ms, [50, 90, 99]).tolist()
    report.max_ms = float(lat_ms.max())
    return report


def run_scaling(steps, requests_per_worker: int = 20, delay_ms: float = 250.0) -> list[BenchReport]:
    """One weak-scaling step per backend count; a failed step is reported, not raised."""
    reports = []
    for n in steps:
        try:
            with spawn_backends(n, delay_ms) as urls:
                reports.append(bench_step(urls, requests_per_worker, delay_ms))
        except Exception as exc:
            reports.append(BenchReport("weak-scaling", n, requests_per_worker, delay_ms, status=f"error: {exc}"))
    return reports


def write_reports(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            row = asdict(r)
            row["clamped"] = int(r.clamped)
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
