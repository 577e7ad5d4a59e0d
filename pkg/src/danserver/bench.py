"""Concurrent load generator that reproduces the many-clients fetch test."""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .client import DanClient
from .errors import DanError
from .model import CalibKey

DELTA_FIELDS = (
    "requests_total",
    "l1_hits",
    "l2_hits",
    "backend_queries",
    "upstream_queries",
    "coalesced_requests",
    "errors_total",
    "bytes_served",
)


def percentile(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile; 0.0 for an empty sample."""
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, -(-len(ordered) * pct // 100))
    return ordered[int(rank) - 1]


@dataclass
class BenchReport:
    clients: int
    requests_per_client: int
    elapsed_ms: float = 0.0
    successes: int = 0
    failures: int = 0
    connect_failures: int = 0
    p50_ms: float = 0.0
    p95_ms: float = 0.0
    max_ms: float = 0.0
    bytes_received: int = 0
    throughput_bytes_s: float = 0.0
    deltas: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)
    payload_digests: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("clients", self.clients),
            ("requests/client", self.requests_per_client),
            ("ok / failed", f"{self.successes} / {self.failures}"),
            ("elapsed ms", f"{self.elapsed_ms:.1f}"),
            ("p50 / p95 / max ms", f"{self.p50_ms:.2f} / {self.p95_ms:.2f} / {self.max_ms:.2f}"),
            ("throughput", f"{self.throughput_bytes_s / 1e6:.2f} MB/s"),
        ]
        rows += [(f"delta {k}", v) for k, v in self.deltas.items()]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def bench(addr, clients: int, requests_per_client: int, keys: Sequence[CalibKey],
          timeout: float = 60.0) -> BenchReport:
    report = BenchReport(clients=clients, requests_per_client=requests_per_client)
    if clients < 1 or requests_per_client < 1 or not keys:
        return report

    with DanClient(addr, timeout=timeout) as admin:
        before = admin.stats()

    lock = threading.Lock()
    latencies: list[float] = []
    digests: dict[str, set] = {}
    start_gate = threading.Barrier(clients + 1)

    def worker(idx: int) -> None:
        try:
            conn = DanClient(addr, timeout=timeout)
        except OSError as exc:
            with lock:
                report.connect_failures += 1
                report.failures += requests_per_client
                report.errors[type(exc).__name__] = report.errors.get(type(exc).__name__, 0) + requests_per_client
            start_gate.wait()
            return
        local = []
        try:
            start_gate.wait()
            for n in range(requests_per_client):
                key = keys[(idx + n) % len(keys)]
                t0 = time.perf_counter()
                try:
                    res = conn.get(key, validate=True)
                except (DanError, OSError, ConnectionError) as exc:
                    with lock:
                        report.failures += 1
                        name = type(exc).__name__
                        report.errors[name] = report.errors.get(name, 0) + 1
                    continue
                dt = (time.perf_counter() - t0) * 1000.0
                local.append(dt)
                digest = hashlib.sha256(res.payload).hexdigest()
                with lock:
                    report.successes += 1
                    report.bytes_received += len(res.payload)
                    report.sources[res.source] = report.sources.get(res.source, 0) + 1
                    digests.setdefault(str(key), set()).add(digest)
        finally:
            conn.close()
            with lock:
                latencies.extend(local)

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(clients)]
    for t in threads:
        t.start()
    start_gate.wait()
    t_start = time.perf_counter()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t_start

    with DanClient(addr, timeout=timeout) as admin:
        after = admin.stats()

    report.elapsed_ms = elapsed * 1000.0
    report.p50_ms = percentile(latencies, 50)
    report.p95_ms = percentile(latencies, 95)
    report.max_ms = max(latencies, default=0.0)
    report.throughput_bytes_s = report.bytes_received / elapsed if elapsed > 0 else 0.0
    report.deltas = {k: after[k] - before[k] for k in DELTA_FIELDS}
    report.payload_digests = {k: sorted(v) for k, v in sorted(digests.items())}
    return report
