"""File-backed data source and the bounded session pool in front of it.

Run sets live at ``<root>/<esc(table)>/<run>.<esc(variant)>.rows``, each file
holding one object in the canonical encoding.  A real database driver would
replace :class:`FileBackend` behind the same ``query`` call.
"""

from __future__ import annotations

import collections
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, TypeVar

from .errors import (
    BackendCorrupt,
    BackendUnavailable,
    CorruptObject,
    IoFailure,
    NotFound,
    PoolTimeout,
    SchemaError,
)
from .model import CalibKey, ColumnSpec, CType, RowSet, _esc, decode_object, encode_object

log = logging.getLogger(__name__)

T = TypeVar("T")

SMT_COLUMNS = (
    ColumnSpec("channel_id", CType.INT),
    ColumnSpec("pedestal", CType.FLOAT),
    ColumnSpec("gain", CType.FLOAT),
)


def run_set_path(root, key: CalibKey) -> Path:
    table_dir = _esc(key.table)
    if table_dir in (".", ".."):
        raise ValueError(f"table name {key.table!r} cannot be stored on disk")
    return Path(root) / table_dir / f"{key.run}.{_esc(key.variant)}.rows"


def smt_rows(n_rows: int, seed: int = 0) -> RowSet:
    """Synthetic pedestal/gain rows, closed-form so any row can be checked by hand."""
    rows = [
        (i, ((i * 2654435761 + seed) % 1000000) / 1000.0, 1.0 + ((i * 40503 + seed) % 1000) / 1000.0)
        for i in range(n_rows)
    ]
    return RowSet._trusted(SMT_COLUMNS, rows)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def gen_dataset(root_dir, table: str, run: int, variant: str, n_rows: int, seed: int = 0) -> Path:
    key = CalibKey(table, run, variant)
    path = run_set_path(root_dir, key)
    payload = encode_object(key, smt_rows(n_rows, seed))
    try:
        _atomic_write(path, payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


@dataclass
class DataSourceSpec:
    root_dir: str
    simulated_latency_ms: int = 0
    fail_switch: bool = False

    def __post_init__(self):
        if self.simulated_latency_ms < 0:
            raise ValueError("simulated_latency_ms must be non-negative")


class FileBackend:
    """Serves run-set files, sleeping a fixed latency per query.

    ``descriptors`` maps table name to the column list a schema declares;
    files for those tables whose columns disagree raise ``SchemaError``.
    """

    def __init__(self, spec: DataSourceSpec, descriptors: Mapping[str, tuple] | None = None):
        root = Path(spec.root_dir)
        if not root.is_dir():
            raise IoFailure(f"backend root {root} is not a readable directory")
        self.spec = spec
        self.root = root
        self.descriptors = dict(descriptors or {})
        self._lock = threading.Lock()
        self.queries = 0

    @property
    def fail_switch(self) -> bool:
        return self.spec.fail_switch

    @fail_switch.setter
    def fail_switch(self, value: bool) -> None:
        self.spec.fail_switch = bool(value)

    def query(self, key: CalibKey) -> RowSet:
        with self._lock:
            self.queries += 1
        if self.spec.simulated_latency_ms:
            time.sleep(self.spec.simulated_latency_ms / 1000.0)
        if self.spec.fail_switch:
            raise BackendUnavailable("backend is switched off")
        try:
            data = run_set_path(self.root, key).read_bytes()
        except (OSError, ValueError):
            raise NotFound(f"no run set for {key}") from None
        try:
            stored_key, rows = decode_object(data)
        except CorruptObject as exc:
            raise BackendCorrupt(f"run set for {key} failed validation: {exc}") from exc
        if stored_key != key:
            raise BackendCorrupt(f"file for {key} holds {stored_key}")
        expected = self.descriptors.get(key.table)
        if expected is not None and tuple(expected) != rows.columns:
            raise SchemaError(
                f"columns of {key} {[(c.name, c.ctype.name) for c in rows.columns]} "
                f"disagree with the declared mapping {[(c.name, c.ctype.name) for c in expected]}"
            )
        return rows


@dataclass
class PoolConfig:
    max_connections: int = 4
    acquire_timeout_ms: int = 5000

    def __post_init__(self):
        if self.max_connections < 1:
            raise ValueError("max_connections must be >= 1")
        if self.acquire_timeout_ms < 1:
            raise ValueError("acquire_timeout_ms must be >= 1")


@dataclass(frozen=True)
class PoolState:
    in_use: int
    waiters: int
    total_acquired: int
    peak_in_use: int
    max_connections: int
    timeouts: int


class ConnectionPool:
    """Bounded set of backend session slots handed out in FIFO order.

    Lowering ``max_connections`` never revokes a held slot; it only stops new
    grants until ``in_use`` drops below the new cap.
    """

    def __init__(self, config: PoolConfig):
        self.config = config
        self._lock = threading.Lock()
        self._waiters: collections.deque[threading.Event] = collections.deque()
        self._in_use = 0
        self._total = 0
        self._peak = 0
        self._timeouts = 0
        self._violations = 0

    @property
    def max_connections(self) -> int:
        return self.config.max_connections

    def set_max_connections(self, n: int) -> None:
        if n < 1:
            raise ValueError("max_connections must be >= 1")
        with self._lock:
            self.config.max_connections = n
            self._grant_locked()

    def _grant_locked(self) -> None:
        while self._waiters and self._in_use < self.config.max_connections:
            waiter = self._waiters.popleft()
            self._take_locked()
            waiter.set()

    def _take_locked(self) -> None:
        self._in_use += 1
        self._total += 1
        if self._in_use > self.config.max_connections:
            self._violations += 1
        self._peak = max(self._peak, self._in_use)

    def acquire(self, timeout_ms: int | None = None) -> None:
        if timeout_ms is None:
            timeout_ms = self.config.acquire_timeout_ms
        with self._lock:
            if not self._waiters and self._in_use < self.config.max_connections:
                self._take_locked()
                return
            waiter = threading.Event()
            self._waiters.append(waiter)
        if waiter.wait(timeout_ms / 1000.0):
            return
        with self._lock:
            # a release may have granted us the slot right after the wait expired
            if waiter.is_set():
                return
            self._waiters.remove(waiter)
            self._timeouts += 1
        raise PoolTimeout(f"no backend session within {timeout_ms} ms")

    def release(self) -> None:
        with self._lock:
            if self._in_use <= 0:
                raise RuntimeError("release without acquire")
            self._in_use -= 1
            self._grant_locked()

    def with_session(self, work: Callable[[], T], timeout_ms: int | None = None) -> T:
        self.acquire(timeout_ms)
        try:
            return work()
        finally:
            self.release()

    def state(self) -> PoolState:
        with self._lock:
            return PoolState(
                in_use=self._in_use,
                waiters=len(self._waiters),
                total_acquired=self._total,
                peak_in_use=self._peak,
                max_connections=self.config.max_connections,
                timeouts=self._timeouts,
            )

    @property
    def violations(self) -> int:
        return self._violations

    def reset_peak(self) -> None:
        with self._lock:
            self._peak = self._in_use
