"""Read-through fetch pipeline with single-flight miss consolidation."""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .cache import TieredCache
from .errors import DanError, FetchTimeout, InternalError, Overloaded
from .model import CalibKey, encode_object
from .monitor import Monitor

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    DIRECT = "DIRECT"
    PROXY = "PROXY"


class Source(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    BACKEND = "BACKEND"
    UPSTREAM = "UPSTREAM"


_BUCKET = {
    Source.L1: "l1_hits",
    Source.L2: "l2_hits",
    Source.BACKEND: "backend_queries",
    Source.UPSTREAM: "upstream_queries",
}


@dataclass
class BrokerConfig:
    mode: Mode = Mode.DIRECT
    max_inflight_keys: int = 256
    fetch_timeout_ms: int = 30000

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.max_inflight_keys < 1:
            raise ValueError("max_inflight_keys must be >= 1")
        if self.fetch_timeout_ms < 1:
            raise ValueError("fetch_timeout_ms must be >= 1")


@dataclass(frozen=True)
class FetchOutcome:
    payload: bytes
    source: Source
    coalesced: bool
    latency_ms: float


class _Flight:
    """One origin fetch that any number of callers wait on."""

    __slots__ = ("done", "payload", "source", "error", "deadline", "followers")

    def __init__(self, deadline: float):
        self.done = threading.Event()
        self.payload: Optional[bytes] = None
        self.source: Optional[Source] = None
        self.error: Optional[DanError] = None
        self.deadline = deadline
        self.followers = 0


class Broker:
    """Answers fetches from the cache tiers, else from one shared origin call.

    ``origin`` is ``backend.query`` wrapped in the pool session (DIRECT) or the
    upstream client (PROXY); see :func:`direct_origin`.  Every completed
    request is counted in exactly one outcome bucket.
    """

    def __init__(
        self,
        config: BrokerConfig,
        cache: TieredCache,
        origin: Callable[[CalibKey, float], bytes],
        monitor: Optional[Monitor] = None,
    ):
        self.config = config
        self.cache = cache
        self.origin = origin
        self.monitor = monitor or Monitor()
        self.counters = self.monitor.counters
        self._origin_source = Source.BACKEND if config.mode is Mode.DIRECT else Source.UPSTREAM
        self._lock = threading.Lock()
        self._inflight: dict[CalibKey, _Flight] = {}
        self.peak_inflight = 0

    @property
    def inflight_count(self) -> int:
        return len(self._inflight)

    def set_max_inflight_keys(self, n: int) -> None:
        if n < 1:
            raise ValueError("max_inflight_keys must be >= 1")
        with self._lock:
            self.config.max_inflight_keys = n

    def fetch(self, key: CalibKey) -> FetchOutcome:
        started = time.perf_counter()
        try:
            hit = self.cache.lookup(key)
        except DanError as exc:
            self._fail(key, exc)
            raise
        if hit is not None:
            payload, tier = hit
            source = Source(tier)
            self.counters.record_request(_BUCKET[source], key.table, len(payload))
            self.monitor.event("DEBUG", "broker", "cache.hit", k=str(key), tier=tier)
            return FetchOutcome(payload, source, False, _ms_since(started))

        with self._lock:
            flight = self._inflight.get(key)
            leader = flight is None
            if leader:
                if len(self._inflight) >= self.config.max_inflight_keys:
                    flight = None
                else:
                    flight = _Flight(time.monotonic() + self.config.fetch_timeout_ms / 1000.0)
                    self._inflight[key] = flight
                    self.peak_inflight = max(self.peak_inflight, len(self._inflight))
            else:
                flight.followers += 1
        if flight is None:
            exc = Overloaded(f"{self.config.max_inflight_keys} keys already in flight")
            self._fail(key, exc)
            raise exc

        if leader:
            self.monitor.event("DEBUG", "broker", "cache.miss", k=str(key))
            worker = threading.Thread(
                target=self._run_origin, args=(key, flight), name=f"origin-{key}", daemon=True
            )
            worker.start()

        if not flight.done.wait(max(0.0, flight.deadline - time.monotonic())):
            with self._lock:
                if self._inflight.get(key) is flight:
                    del self._inflight[key]
            exc = FetchTimeout(f"fetch of {key} exceeded {self.config.fetch_timeout_ms} ms")
            self._fail(key, exc)
            raise exc
        if flight.error is not None:
            self._fail(key, flight.error)
            raise flight.error

        payload = flight.payload
        bucket = _BUCKET[flight.source] if leader else "coalesced_requests"
        self.counters.record_request(bucket, key.table, len(payload))
        return FetchOutcome(payload, flight.source, not leader, _ms_since(started))

    def _run_origin(self, key: CalibKey, flight: _Flight) -> None:
        try:
            # a flight for this key may have landed between our miss and joining
            hit = self.cache.lookup(key, count_miss=False)
            if hit is not None:
                flight.payload, tier = hit
                flight.source = Source(tier)
            else:
                self.counters.incr("origin_fetches")
                remaining = max(0.001, flight.deadline - time.monotonic())
                payload = self.origin(key, remaining)
                try:
                    self.cache.store(key, payload)
                except DanError as exc:
                    # the bytes are still good; only caching them failed
                    log.error("could not cache %s: %s", key, exc)
                    self.monitor.event("ERROR", "cache", "cache.store_failed", k=str(key), msg=str(exc))
                flight.payload = payload
                flight.source = self._origin_source
                self.monitor.event(
                    "INFO", "broker", "origin.fetch",
                    k=str(key), via=flight.source.value, bytes=len(payload),
                )
        except DanError as exc:
            flight.error = exc
        except Exception as exc:  # surfaced to every waiter as INTERNAL
            log.exception("origin fetch of %s failed", key)
            flight.error = InternalError(f"{type(exc).__name__}: {exc}")
        if flight.error is not None:
            self.counters.incr("origin_failures")
            self.monitor.event(
                "ERROR", "broker", "backend.error",
                k=str(key), error=type(flight.error).__name__, msg=str(flight.error),
            )
        with self._lock:
            if self._inflight.get(key) is flight:
                del self._inflight[key]
        flight.done.set()

    def _fail(self, key: CalibKey, exc: DanError) -> None:
        self.counters.record_request("errors_total", key.table)
        self.monitor.event(
            "INFO", "broker", "request.error", k=str(key), error=type(exc).__name__
        )


def _ms_since(started: float) -> float:
    return (time.perf_counter() - started) * 1000.0


def direct_origin(backend, pool) -> Callable[[CalibKey, float], bytes]:
    """Origin for DIRECT mode: query inside a pool session, then encode."""

    def fetch(key: CalibKey, timeout_s: float) -> bytes:
        rows = pool.with_session(lambda: backend.query(key))
        return encode_object(key, rows)

    return fetch
