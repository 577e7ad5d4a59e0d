"""Two-level object cache: a byte-budgeted memory LRU over a persistent disk store.

Objects are write-once, so neither tier ever invalidates or replaces an entry;
they only evict.
"""

from __future__ import annotations

import collections
import hashlib
import json
import logging
import os
import re
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import CorruptObject, IoFailure, WormViolation
from .model import CalibKey, cache_key_string, crc32, decode_object, payload_checksum

log = logging.getLogger(__name__)

L1 = "L1"
L2 = "L2"
INDEX_NAME = "index.json"
INDEX_VERSION = 1


class L1Cache:
    """In-memory LRU bounded by total payload bytes."""

    def __init__(self, budget_bytes: int):
        if budget_bytes < 1:
            raise ValueError("budget_bytes must be >= 1")
        self.budget_bytes = budget_bytes
        self._entries: collections.OrderedDict[CalibKey, bytes] = collections.OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.rejected = 0

    def _evict_to(self, limit: int) -> None:
        while self._bytes > limit and self._entries:
            _, old = self._entries.popitem(last=False)
            self._bytes -= len(old)
            self.evictions += 1

    def insert(self, key: CalibKey, payload: bytes) -> bool:
        size = len(payload)
        with self._lock:
            present = self._entries.get(key)
            if present is not None:
                if present != payload:
                    raise WormViolation(f"different payload offered for {key}")
                self._entries.move_to_end(key)
                return True
            if size > self.budget_bytes:
                self.rejected += 1
                return False
            self._evict_to(self.budget_bytes - size)
            self._entries[key] = payload
            self._bytes += size
            return True

    def lookup(self, key: CalibKey) -> Optional[bytes]:
        with self._lock:
            payload = self._entries.get(key)
            if payload is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return payload

    def set_budget(self, budget_bytes: int) -> None:
        if budget_bytes < 1:
            raise ValueError("budget_bytes must be >= 1")
        with self._lock:
            self.budget_bytes = budget_bytes
            self._evict_to(budget_bytes)

    def keys(self) -> list[CalibKey]:
        """Keys from least to most recently used."""
        with self._lock:
            return list(self._entries)

    def __contains__(self, key: CalibKey) -> bool:
        with self._lock:
            return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def bytes_used(self) -> int:
        return self._bytes


_FLATTEN_UNSAFE = re.compile(r"[_\x00-\x1f\x7f]")
_MAX_NAME = 200


def l2_filename(key_string: str) -> str:
    """Flattened file name for a key string.

    '_' and control characters are percent-encoded first so the '/' -> '__'
    replacement stays reversible.  Names too long for the filesystem fall back
    to a digest; the index holds the authoritative key string either way.
    """
    flat = _FLATTEN_UNSAFE.sub(lambda m: "%{:02X}".format(ord(m.group())), key_string)
    flat = flat.replace("/", "__")
    if flat.startswith("."):
        flat = "%2E" + flat[1:]
    if len(flat.encode("utf-8")) > _MAX_NAME:
        flat = "h%" + hashlib.sha256(key_string.encode("utf-8")).hexdigest()
    return flat + ".obj"


@dataclass
class CacheEntryMeta:
    key_string: str
    file: str
    size_bytes: int
    crc32: int
    last_access: int

    def to_json(self) -> dict:
        return {
            "key_string": self.key_string,
            "file": self.file,
            "size": self.size_bytes,
            "crc32": self.crc32,
            "last_access": self.last_access,
        }


class L2Cache:
    """Disk store of encoded objects with a JSON index of size, CRC and recency.

    Files are written to a temp name and renamed into place.  The index is
    rewritten the same way after every change; if it is missing or unreadable
    at startup, it is rebuilt by scanning and validating the ``.obj`` files.
    """

    def __init__(self, directory, budget_bytes: int, monitor=None):
        if budget_bytes < 1:
            raise ValueError("budget_bytes must be >= 1")
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.budget_bytes = budget_bytes
        self.monitor = monitor
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self._entries: collections.OrderedDict[str, CacheEntryMeta] = collections.OrderedDict()
        self._bytes = 0
        self._seq = 0
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.corrupt_drops = 0
        self.rebuilt = False
        self._open()

    # -- startup ------------------------------------------------------------

    def _open(self) -> None:
        for stale in self.dir.glob(".tmp-*"):
            stale.unlink(missing_ok=True)
        try:
            entries = self._read_index()
        except (OSError, ValueError, KeyError, TypeError) as exc:
            if (self.dir / INDEX_NAME).exists():
                log.warning("L2 index in %s unreadable (%s); rebuilding", self.dir, exc)
            entries = self._scan()
            self.rebuilt = True
        entries.sort(key=lambda e: e.last_access)
        for meta in entries:
            self._entries[meta.key_string] = meta
            self._bytes += meta.size_bytes
            self._seq = max(self._seq, meta.last_access)
        with self._lock:
            self._evict_locked()
            self._write_index_locked()

    def _read_index(self) -> list[CacheEntryMeta]:
        doc = json.loads((self.dir / INDEX_NAME).read_text("utf-8"))
        if doc.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index version {doc.get('version')!r}")
        entries = []
        known = set()
        for item in doc["entries"]:
            meta = CacheEntryMeta(
                key_string=str(item["key_string"]),
                file=str(item["file"]),
                size_bytes=int(item["size"]),
                crc32=int(item["crc32"]),
                last_access=int(item["last_access"]),
            )
            if meta.file != l2_filename(meta.key_string):
                raise ValueError(f"index entry {meta.key_string!r} names foreign file {meta.file!r}")
            path = self.dir / meta.file
            try:
                if path.stat().st_size != meta.size_bytes:
                    log.warning("dropping L2 entry %s: size mismatch", meta.key_string)
                    path.unlink(missing_ok=True)
                    continue
            except OSError:
                continue
            entries.append(meta)
            known.add(meta.file)
        # objects written after the last index flush (crash window) are adopted
        orphans = sorted(p for p in self.dir.glob("*.obj") if p.name not in known)
        seq = max((e.last_access for e in entries), default=0)
        for path in orphans:
            meta = self._adopt(path, seq + 1)
            if meta is not None:
                seq += 1
                entries.append(meta)
        return entries

    def _adopt(self, path: Path, seq: int) -> Optional[CacheEntryMeta]:
        try:
            data = path.read_bytes()
            key, _ = decode_object(data)
        except (OSError, CorruptObject) as exc:
            log.warning("discarding unreadable L2 file %s: %s", path.name, exc)
            path.unlink(missing_ok=True)
            return None
        ks = cache_key_string(key)
        if path.name != l2_filename(ks):
            path.unlink(missing_ok=True)
            return None
        return CacheEntryMeta(ks, path.name, len(data), payload_checksum(data), seq)

    def _scan(self) -> list[CacheEntryMeta]:
        entries = []
        for seq, path in enumerate(sorted(self.dir.glob("*.obj")), start=1):
            meta = self._adopt(path, seq)
            if meta is not None:
                entries.append(meta)
        return entries

    # -- index --------------------------------------------------------------

    def _write_index_locked(self) -> None:
        doc = {
            "version": INDEX_VERSION,
            "entries": [m.to_json() for m in self._entries.values()],
        }
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, separators=(",", ":"))
            os.replace(tmp, self.dir / INDEX_NAME)
        except OSError as exc:
            Path(tmp).unlink(missing_ok=True)
            raise IoFailure(f"cannot write L2 index: {exc}") from exc

    def _evict_locked(self) -> None:
        while self._bytes > self.budget_bytes and self._entries:
            ks, meta = self._entries.popitem(last=False)
            self._bytes -= meta.size_bytes
            self.evictions += 1
            (self.dir / meta.file).unlink(missing_ok=True)

    def _key_lock(self, ks: str) -> threading.Lock:
        with self._lock:
            lock = self._key_locks.get(ks)
            if lock is None:
                lock = self._key_locks[ks] = threading.Lock()
            return lock

    # -- operations ---------------------------------------------------------

    def store(self, key: CalibKey, payload: bytes) -> bool:
        """Persist ``payload``; returns False if it is larger than the budget."""
        ks = cache_key_string(key)
        size = len(payload)
        if size > self.budget_bytes:
            return False
        with self._key_lock(ks):
            with self._lock:
                if ks in self._entries:
                    return True
            name = l2_filename(ks)
            fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=".tmp-", suffix=".obj")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(payload)
                os.replace(tmp, self.dir / name)
            except OSError as exc:
                Path(tmp).unlink(missing_ok=True)
                raise IoFailure(f"cannot write L2 object for {ks}: {exc}") from exc
            with self._lock:
                self._seq += 1
                meta = CacheEntryMeta(ks, name, size, payload_checksum(payload), self._seq)
                self._entries[ks] = meta
                self._bytes += size
                self._evict_locked()
                self._write_index_locked()
        with self._lock:
            self._key_locks.pop(ks, None)
        return True

    def load(self, key: CalibKey) -> Optional[bytes]:
        ks = cache_key_string(key)
        with self._lock:
            meta = self._entries.get(ks)
            if meta is None:
                self.misses += 1
                return None
        path = self.dir / meta.file
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            # evicted between the index check and the read
            with self._lock:
                if self._entries.get(ks) is not meta:
                    self.misses += 1
                    return None
            return self._drop_corrupt(ks, meta, "file missing")
        except OSError as exc:
            return self._drop_corrupt(ks, meta, f"unreadable: {exc}")
        if (
            len(data) != meta.size_bytes
            or len(data) < 4
            or crc32(memoryview(data)[:-4]) != meta.crc32
            or payload_checksum(data) != meta.crc32
        ):
            return self._drop_corrupt(ks, meta, "crc mismatch")
        with self._lock:
            if self._entries.get(ks) is meta:
                self._seq += 1
                meta.last_access = self._seq
                self._entries.move_to_end(ks)
                try:
                    self._write_index_locked()
                except IoFailure as exc:
                    log.warning("%s", exc)
            self.hits += 1
        return data

    def _drop_corrupt(self, ks: str, meta: CacheEntryMeta, reason: str) -> None:
        with self._lock:
            if self._entries.get(ks) is meta:
                del self._entries[ks]
                self._bytes -= meta.size_bytes
                (self.dir / meta.file).unlink(missing_ok=True)
                try:
                    self._write_index_locked()
                except IoFailure as exc:
                    log.warning("%s", exc)
            self.corrupt_drops += 1
            self.misses += 1
        log.error("dropped corrupt L2 entry %s (%s)", ks, reason)
        if self.monitor is not None:
            self.monitor.event("ERROR", "cache", "cache.corrupt_drop", key=ks, reason=reason)
        return None

    def key_strings(self) -> list[str]:
        """Key strings from least to most recently used."""
        with self._lock:
            return list(self._entries)

    def entry(self, key: CalibKey) -> Optional[CacheEntryMeta]:
        with self._lock:
            return self._entries.get(cache_key_string(key))

    def __contains__(self, key: CalibKey) -> bool:
        with self._lock:
            return cache_key_string(key) in self._entries

    @property
    def bytes_used(self) -> int:
        return self._bytes


@dataclass(frozen=True)
class CacheStats:
    l1_hits: int
    l2_hits: int
    misses: int
    evictions_l1: int
    evictions_l2: int
    corrupt_drops: int
    l1_bytes: int
    l2_bytes: int
    l1_budget_bytes: int
    l2_budget_bytes: int
    l1_entries: int
    l2_entries: int


class TieredCache:
    """L1 in front of L2; L2 hits are promoted into L1."""

    def __init__(self, l1: L1Cache, l2: L2Cache):
        self.l1 = l1
        self.l2 = l2
        self._lock = threading.Lock()
        self.l1_hits = 0
        self.l2_hits = 0
        self.misses = 0

    def lookup(self, key: CalibKey, count_miss: bool = True) -> Optional[tuple[bytes, str]]:
        """(payload, tier) or None.  ``count_miss=False`` is for re-checks of a
        miss already counted."""
        payload = self.l1.lookup(key)
        if payload is not None:
            with self._lock:
                self.l1_hits += 1
            return payload, L1
        payload = self.l2.load(key)
        if payload is not None:
            self.l1.insert(key, payload)
            with self._lock:
                self.l2_hits += 1
            return payload, L2
        if count_miss:
            with self._lock:
                self.misses += 1
        return None

    def store(self, key: CalibKey, payload: bytes) -> None:
        self.l2.store(key, payload)
        self.l1.insert(key, payload)

    def stats(self) -> CacheStats:
        return CacheStats(
            l1_hits=self.l1_hits,
            l2_hits=self.l2_hits,
            misses=self.misses,
            evictions_l1=self.l1.evictions,
            evictions_l2=self.l2.evictions,
            corrupt_drops=self.l2.corrupt_drops,
            l1_bytes=self.l1.bytes_used,
            l2_bytes=self.l2.bytes_used,
            l1_budget_bytes=self.l1.budget_bytes,
            l2_budget_bytes=self.l2.budget_bytes,
            l1_entries=len(self.l1),
            l2_entries=len(self.l2.key_strings()),
        )
