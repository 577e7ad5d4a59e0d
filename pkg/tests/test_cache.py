import json
import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from danserver.backend import smt_rows
from danserver.cache import INDEX_NAME, L1, L2, L1Cache, L2Cache, TieredCache, l2_filename
from danserver.errors import WormViolation
from danserver.model import CalibKey, ColumnSpec, CType, RowSet, cache_key_string, encode_object
from danserver.monitor import Monitor, Severity

from oracles import ReferenceLRU


def key(n, table="T"):
    return CalibKey(table, n, "v")


SIZES = st.one_of(st.just(28), st.integers(36, 120))


def blob(n, size):
    """Payload of exactly ``size`` bytes for key(n).

    28 is the empty object; one string column costs 8 more, so 29..35 cannot occur.
    """
    if size == 28:
        return encode_object(key(n), RowSet([]))
    cols = [ColumnSpec("s", CType.STRING)]
    base = len(encode_object(key(n), RowSet(cols, [("",)])))
    payload = encode_object(key(n), RowSet(cols, [("x" * (size - base),)]))
    assert len(payload) == size, (len(payload), size)
    return payload


# -- L1 -----------------------------------------------------------------------


def test_l1_lru_eviction():
    l1 = L1Cache(100)
    a, b = blob(1, 60), blob(2, 50)
    assert l1.insert(key(1), a)
    assert l1.insert(key(2), b)
    assert l1.keys() == [key(2)]
    assert l1.bytes_used == 50


def test_l1_touch_protects_entry():
    l1 = L1Cache(100)
    l1.insert(key(1), blob(1, 60))
    l1.insert(key(2), blob(2, 36))
    assert l1.lookup(key(1)) is not None
    l1.insert(key(3), blob(3, 40))
    assert set(l1.keys()) == {key(1), key(3)}


def test_l1_oversize_rejected():
    l1 = L1Cache(100)
    l1.insert(key(1), blob(1, 60))
    assert not l1.insert(key(4), blob(4, 150))
    assert l1.keys() == [key(1)]
    assert l1.bytes_used == 60


def test_l1_lookup():
    l1 = L1Cache(100)
    a = blob(1, 60)
    l1.insert(key(1), a)
    assert l1.lookup(key(1)) == a
    assert l1.lookup(key(9)) is None
    l1.insert(key(2), blob(2, 50))
    misses = l1.misses
    assert l1.lookup(key(1)) is None
    assert l1.misses == misses + 1


def test_l1_worm():
    l1 = L1Cache(1000)
    l1.insert(key(1), blob(1, 60))
    assert l1.insert(key(1), blob(1, 60))
    with pytest.raises(WormViolation):
        l1.insert(key(1), blob(1, 61))


def test_l1_shrink_budget():
    l1 = L1Cache(1000)
    for i in range(5):
        l1.insert(key(i), blob(i, 100))
    l1.set_budget(250)
    assert l1.bytes_used <= 250
    assert l1.keys() == [key(3), key(4)]
    assert l1.evictions == 3


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["ins", "get"]), st.integers(0, 9), SIZES), max_size=200),
       st.integers(40, 300))
def test_l1_matches_reference(trace, budget):
    l1 = L1Cache(budget)
    ref = ReferenceLRU(budget)
    sizes = {}
    for op, k, size in trace:
        size = sizes.setdefault(k, size)
        if op == "ins":
            assert l1.insert(key(k), blob(k, size)) == ref.insert(k, size)
        else:
            assert (l1.lookup(key(k)) is not None) == ref.lookup(k)
        assert [x.run for x in l1.keys()] == ref.keys()
        assert l1.bytes_used == ref.used() <= budget


# -- L2 -----------------------------------------------------------------------


def test_l2_store_load_and_restart(tmp_path):
    l2 = L2Cache(tmp_path, 10_000)
    a = blob(1, 60)
    assert l2.load(key(1)) is None
    l2.store(key(1), a)
    assert l2.load(key(1)) == a
    again = L2Cache(tmp_path, 10_000)
    assert not again.rebuilt
    assert again.load(key(1)) == a


def test_l2_budget_eviction(tmp_path):
    l2 = L2Cache(tmp_path, 100)
    l2.store(key(1), blob(1, 60))
    l2.store(key(2), blob(2, 50))
    index = json.loads((tmp_path / INDEX_NAME).read_text())
    assert [e["key_string"] for e in index["entries"]] == ["T/2/v"]
    assert not (tmp_path / l2_filename("T/1/v")).exists()
    assert (tmp_path / l2_filename("T/2/v")).exists()
    assert l2.evictions == 1


def test_l2_store_twice_is_noop(tmp_path):
    l2 = L2Cache(tmp_path, 1000)
    l2.store(key(1), blob(1, 60))
    l2.store(key(1), blob(1, 60))
    assert len(list(tmp_path.glob("*.obj"))) == 1
    index = json.loads((tmp_path / INDEX_NAME).read_text())
    assert len(index["entries"]) == 1
    entry = index["entries"][0]
    assert entry["size"] == 60
    assert set(entry) == {"key_string", "file", "size", "crc32", "last_access"}


def test_l2_corruption_self_heals(tmp_path):
    mon = Monitor()
    sub = mon.subscribe(object(), Severity.ERROR)
    l2 = L2Cache(tmp_path, 1000, monitor=mon)
    payload = blob(1, 60)
    l2.store(key(1), payload)
    path = tmp_path / l2_filename("T/1/v")
    data = bytearray(path.read_bytes())
    data[40] ^= 0x10
    path.write_bytes(bytes(data))
    # confirm independently that the flipped file no longer matches its checksum
    import zlib
    assert zlib.crc32(bytes(data[:-4])) != int.from_bytes(data[-4:], "big")
    assert l2.load(key(1)) is None
    assert not path.exists()
    assert l2.corrupt_drops == 1
    assert key(1) not in l2
    events = sub.drain()
    assert [e.code for e in events] == ["cache.corrupt_drop"]


def test_l2_index_rebuild(tmp_path):
    l2 = L2Cache(tmp_path, 10_000)
    for i in range(3):
        l2.store(key(i), blob(i, 60 + i))
    (tmp_path / INDEX_NAME).write_text("{not json")
    rebuilt = L2Cache(tmp_path, 10_000)
    assert rebuilt.rebuilt
    assert sorted(rebuilt.key_strings()) == ["T/0/v", "T/1/v", "T/2/v"]
    assert rebuilt.load(key(2)) == blob(2, 62)
    (tmp_path / INDEX_NAME).unlink()
    assert L2Cache(tmp_path, 10_000).rebuilt


def test_l2_adopts_orphans_and_drops_junk(tmp_path):
    l2 = L2Cache(tmp_path, 10_000)
    l2.store(key(1), blob(1, 60))
    # an object whose index update never happened, plus garbage and a stale temp
    (tmp_path / l2_filename("T/2/v")).write_bytes(blob(2, 70))
    (tmp_path / "junk.obj").write_bytes(b"garbage")
    (tmp_path / ".tmp-abc.obj").write_bytes(b"partial")
    again = L2Cache(tmp_path, 10_000)
    assert again.key_strings() == ["T/1/v", "T/2/v"]
    assert not (tmp_path / "junk.obj").exists()
    assert not (tmp_path / ".tmp-abc.obj").exists()


def test_l2_recency_survives_restart(tmp_path):
    l2 = L2Cache(tmp_path, 200)
    l2.store(key(1), blob(1, 60))
    l2.store(key(2), blob(2, 60))
    l2.load(key(1))  # key 2 is now least recent
    again = L2Cache(tmp_path, 200)
    assert again.key_strings() == ["T/2/v", "T/1/v"]
    again.store(key(3), blob(3, 60))
    again.store(key(4), blob(4, 60))
    assert "T/2/v" not in again.key_strings()


def test_l2_filename_flattening():
    assert l2_filename("SMT/1001/v1") == "SMT__1001__v1.obj"
    assert l2_filename("x__1/2/v") != l2_filename("x/1/2__v")
    assert "/" not in l2_filename("a%2Fb/1/")
    assert l2_filename("../1/").startswith("%2E")
    assert len(l2_filename("t" * 500 + "/1/")) < 100


@given(st.lists(st.builds(CalibKey, st.text(alphabet="a_/%.", min_size=1, max_size=6),
                          st.integers(0, 3), st.text(alphabet="a_/%.", max_size=6)), max_size=30))
def test_l2_filenames_injective(keys):
    names = {}
    for k in keys:
        ks = cache_key_string(k)
        names.setdefault(l2_filename(ks), set()).add(ks)
    assert all(len(v) == 1 for v in names.values())


def test_l2_concurrent_same_key_single_write(tmp_path):
    l2 = L2Cache(tmp_path, 10_000)
    payload = blob(1, 500)
    threads = [threading.Thread(target=l2.store, args=(key(1), payload)) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert l2.key_strings() == ["T/1/v"]
    assert l2.bytes_used == 500
    assert len(list(tmp_path.glob("*.obj"))) == 1


# -- tiers --------------------------------------------------------------------


def test_tier_lookup_order(tmp_path):
    tier = TieredCache(L1Cache(1000), L2Cache(tmp_path, 1000))
    a = blob(1, 60)
    tier.store(key(1), a)
    l2_hits = tier.l2.hits
    assert tier.lookup(key(1)) == (a, L1)
    assert tier.l2.hits == l2_hits


def test_tier_promotion(tmp_path):
    l2 = L2Cache(tmp_path, 1000)
    l2.store(key(1), blob(1, 60))
    tier = TieredCache(L1Cache(1000), l2)
    assert tier.lookup(key(1)) == (blob(1, 60), L2)
    assert tier.lookup(key(1)) == (blob(1, 60), L1)
    assert tier.lookup(key(2)) is None
    assert tier.stats().misses == 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["store", "get"]), st.integers(0, 12), SIZES), max_size=80),
       st.integers(30, 400), st.integers(30, 600))
def test_budgets_hold_on_random_traces(tmp_path_factory, trace, b1, b2):
    tier = TieredCache(L1Cache(b1), L2Cache(tmp_path_factory.mktemp("l2"), b2))
    sizes = {}
    for op, k, size in trace:
        size = sizes.setdefault(k, size)
        if op == "store":
            tier.store(key(k), blob(k, size))
        else:
            hit = tier.lookup(key(k))
            if hit is not None:
                assert hit[0] == blob(k, size)
        stats = tier.stats()
        assert stats.l1_bytes <= b1
        assert stats.l2_bytes <= b2


def test_worm_under_concurrent_readers(tmp_path):
    tier = TieredCache(L1Cache(2000), L2Cache(tmp_path, 4000))
    payloads = {k: blob(k, 100 + k) for k in range(30)}
    first_seen = {}
    bad = []
    lock = threading.Lock()

    def reader(seed):
        rng = random.Random(seed)
        for _ in range(300):
            k = rng.randrange(30)
            if rng.random() < 0.3:
                tier.store(key(k), payloads[k])
            hit = tier.lookup(key(k))
            if hit is None:
                continue
            with lock:
                seen = first_seen.setdefault(k, hit[0])
                if seen != hit[0]:
                    bad.append(k)

    threads = [threading.Thread(target=reader, args=(s,)) for s in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert bad == []
    assert all(first_seen[k] == payloads[k] for k in first_seen)


def test_twenty_run_sets_fit_l1():
    l1 = L1Cache(25 * 1000 * 1000)
    payloads = [encode_object(CalibKey("SMT_PED", r, "v"), smt_rows(40_000, r)) for r in range(20)]
    assert all(len(p) <= 1_000_000 for p in payloads)
    for r, p in enumerate(payloads):
        assert l1.insert(CalibKey("SMT_PED", r, "v"), p)
    assert l1.evictions == 0
    assert len(l1) == 20
