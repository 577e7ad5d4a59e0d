import random
import threading
import time

import pytest

from danserver.backend import ConnectionPool, DataSourceSpec, FileBackend, PoolConfig
from danserver.broker import Broker, BrokerConfig, Mode, Source, direct_origin
from danserver.cache import L1Cache, L2Cache, TieredCache
from danserver.errors import BackendUnavailable, FetchTimeout, NotFound, Overloaded
from danserver.model import CalibKey, decode_object, encode_object
from danserver.monitor import OUTCOME_BUCKETS, Monitor, conservation_holds

from oracles import counters_from_observations


class SlowOrigin:
    """Origin that counts calls, waits ``delay`` seconds and can be told to fail."""

    def __init__(self, delay=0.0, error=None):
        self.delay = delay
        self.error = error
        self.calls = 0
        self.lock = threading.Lock()

    def __call__(self, key, timeout_s):
        with self.lock:
            self.calls += 1
        time.sleep(self.delay)
        if self.error is not None:
            raise self.error
        return encode_object(key, _rows(key))


def _rows(key):
    from danserver.backend import smt_rows
    return smt_rows(8, key.run)


def make_broker(tmp_path, origin, mode=Mode.DIRECT, **cfg):
    cache = TieredCache(L1Cache(1 << 20), L2Cache(tmp_path / "l2", 4 << 20))
    return Broker(BrokerConfig(mode=mode, **cfg), cache, origin, Monitor())


def run_concurrently(n, fn):
    results = [None] * n
    gate = threading.Barrier(n)

    def worker(i):
        gate.wait()
        try:
            results[i] = fn(i)
        except Exception as exc:  # collected for assertions
            results[i] = exc

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results


def observed(results):
    return [None if isinstance(r, Exception) else (r.source.value, r.coalesced) for r in results]


def assert_counters(broker, results):
    snap = broker.counters.snapshot()
    assert conservation_holds(snap)
    expected = counters_from_observations(observed(results))
    for name in ("requests_total",) + OUTCOME_BUCKETS:
        assert snap[name] == expected[name], name


K = CalibKey("SMT_PED", 1, "v1")


def test_concurrent_misses_coalesce(tmp_path):
    origin = SlowOrigin(delay=0.2)
    broker = make_broker(tmp_path, origin)
    results = run_concurrently(50, lambda i: broker.fetch(K))
    assert origin.calls == 1
    assert all(not isinstance(r, Exception) for r in results)
    assert len({r.payload for r in results}) == 1
    assert sum(not r.coalesced for r in results) == 1
    snap = broker.counters.snapshot()
    assert snap["backend_queries"] == 1
    assert snap["coalesced_requests"] == 49
    assert broker.inflight_count == 0
    assert_counters(broker, results)


def test_sequential_fetch_hits_l1(tmp_path):
    broker = make_broker(tmp_path, SlowOrigin())
    first = broker.fetch(K)
    second = broker.fetch(K)
    assert first.source is Source.BACKEND
    assert second.source is Source.L1
    assert second.payload == first.payload
    snap = broker.counters.snapshot()
    assert (snap["backend_queries"], snap["l1_hits"]) == (1, 1)


def test_l2_hit_after_l1_loss(tmp_path):
    broker = make_broker(tmp_path, SlowOrigin())
    broker.fetch(K)
    broker.cache.l1.set_budget(1)
    assert broker.fetch(K).source is Source.L2


def test_proxy_upstream_down(tmp_path):
    origin = SlowOrigin()
    broker = make_broker(tmp_path, origin, mode=Mode.PROXY)
    assert broker.fetch(K).source is Source.UPSTREAM
    origin.error = BackendUnavailable("connection refused")
    assert broker.fetch(K).source is Source.L1
    with pytest.raises(BackendUnavailable):
        broker.fetch(CalibKey("SMT_PED", 2, "v1"))
    snap = broker.counters.snapshot()
    assert snap["upstream_queries"] == 1
    assert snap["errors_total"] == 1
    assert snap["origin_failures"] == 1


def test_followers_share_the_error(tmp_path):
    origin = SlowOrigin(delay=0.2, error=BackendUnavailable("down"))
    broker = make_broker(tmp_path, origin)
    results = run_concurrently(20, lambda i: broker.fetch(K))
    assert origin.calls == 1
    assert all(isinstance(r, BackendUnavailable) for r in results)
    assert broker.counters["errors_total"] == 20
    assert broker.counters["coalesced_requests"] == 0
    assert_counters(broker, results)


def test_errors_are_not_cached(tmp_path):
    origin = SlowOrigin(error=NotFound("no such run"))
    broker = make_broker(tmp_path, origin)
    with pytest.raises(NotFound):
        broker.fetch(K)
    origin.error = None
    assert broker.fetch(K).source is Source.BACKEND
    assert origin.calls == 2


def test_overloaded_when_table_full(tmp_path):
    origin = SlowOrigin(delay=0.3)
    broker = make_broker(tmp_path, origin, max_inflight_keys=1)
    results = run_concurrently(2, lambda i: broker.fetch(CalibKey("T", i, "")))
    kinds = sorted(type(r).__name__ for r in results)
    assert kinds == ["FetchOutcome", "Overloaded"]
    assert_counters(broker, results)


def test_follower_allowed_when_table_full(tmp_path):
    broker = make_broker(tmp_path, SlowOrigin(delay=0.3), max_inflight_keys=1)
    results = run_concurrently(5, lambda i: broker.fetch(K))
    assert not any(isinstance(r, Overloaded) for r in results)


def test_timeout_fails_all_waiters(tmp_path):
    origin = SlowOrigin(delay=1.0)
    broker = make_broker(tmp_path, origin, fetch_timeout_ms=200)
    t0 = time.monotonic()
    results = run_concurrently(5, lambda i: broker.fetch(K))
    assert time.monotonic() - t0 < 0.9
    assert all(isinstance(r, FetchTimeout) for r in results)
    assert broker.inflight_count == 0
    assert_counters(broker, results)


def test_single_flight_stress(tmp_path):
    rng = random.Random(11)
    for trial in range(4):
        callers = rng.choice([8, 16, 32, 64])
        keys = [CalibKey("T", trial * 10 + i, "") for i in range(3)]
        origin = SlowOrigin(delay=0.05)
        broker = make_broker(tmp_path / str(trial), origin)
        results = run_concurrently(callers, lambda i: broker.fetch(keys[i % 3]))
        assert origin.calls == 3
        for k in keys:
            got = {r.payload for r, i in zip(results, range(callers)) if keys[i % 3] == k}
            assert len(got) == 1
            assert decode_object(got.pop())[0] == k
        assert broker.counters["backend_queries"] == 3
        assert_counters(broker, results)


def test_conservation_under_mixed_load(tmp_path):
    origin = SlowOrigin(delay=0.01)
    broker = make_broker(tmp_path, origin, max_inflight_keys=3)
    rng = random.Random(5)
    plan = [(rng.randrange(12), rng.random() < 0.1) for _ in range(300)]

    def call(i):
        run, bad = plan[i]
        if bad:
            return broker.fetch(CalibKey("T", run, "bad"))
        return broker.fetch(CalibKey("T", run, ""))

    def failing_origin(key, timeout_s):
        if key.variant == "bad":
            raise NotFound(str(key))
        return origin(key, timeout_s)

    broker.origin = failing_origin
    results = run_concurrently(len(plan), call)
    assert_counters(broker, results)
    assert broker.peak_inflight <= 3


def test_direct_origin_uses_pool(tmp_path, dataset):
    key = dataset(rows=10)
    backend = FileBackend(DataSourceSpec(tmp_path / "data"))
    pool = ConnectionPool(PoolConfig(max_connections=2))
    broker = make_broker(tmp_path, direct_origin(backend, pool))
    out = broker.fetch(key)
    assert decode_object(out.payload)[1].rows[0][0] == 0
    assert pool.state().total_acquired == 1
    with pytest.raises(NotFound):
        broker.fetch(CalibKey("SMT_PED", 99, "v1"))


def test_one_cold_fetch_is_one_cache_miss(tmp_path):
    broker = make_broker(tmp_path, SlowOrigin())
    broker.fetch(K)
    broker.fetch(K)
    stats = broker.cache.stats()
    assert (stats.misses, stats.l1_hits, stats.l2_hits) == (1, 1, 0)
