"""Blocking client for the wire protocol, plus the upstream fetcher used in proxy mode."""

from __future__ import annotations

import collections
import socket
import threading
from dataclasses import dataclass
from typing import Optional

from .errors import (
    BackendUnavailable,
    CorruptObject,
    DanError,
    FetchTimeout,
    InternalError,
    Malformed,
    error_for_code,
)
from .model import CalibKey, decode_object
from .protocol import (
    Message,
    MType,
    decode_get_resp,
    dump_json,
    parse_addr,
    read_frame,
    send_frame,
)


@dataclass(frozen=True)
class GetResult:
    meta: dict
    payload: bytes

    @property
    def source(self) -> str:
        return self.meta.get("source", "")

    @property
    def coalesced(self) -> bool:
        return bool(self.meta.get("coalesced"))


class DanClient:
    """One connection, one outstanding request at a time.

    EVENT frames that arrive while waiting for a response are queued and can
    be read with :meth:`next_event`.
    """

    def __init__(self, addr, timeout: Optional[float] = 30.0):
        self.addr = parse_addr(addr)
        self.timeout = timeout
        self.sock = socket.create_connection(self.addr, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.events: collections.deque[str] = collections.deque()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def settimeout(self, timeout: Optional[float]) -> None:
        self.timeout = timeout
        self.sock.settimeout(timeout)

    def _read(self) -> Message:
        msg = read_frame(self.sock)
        if msg is None:
            raise ConnectionError("server closed the connection")
        return msg

    def request(self, mtype: MType, body: bytes = b"{}") -> Message:
        send_frame(self.sock, mtype, body)
        while True:
            msg = self._read()
            if msg.mtype is MType.EVENT:
                self.events.append(msg.body.decode("utf-8"))
                continue
            if msg.mtype is MType.ERROR:
                doc = msg.json()
                raise error_for_code(int(doc.get("code", 6)), str(doc.get("message", "")))
            return msg

    def get(self, key: CalibKey, validate: bool = True) -> GetResult:
        body = dump_json({"table": key.table, "run": key.run, "variant": key.variant})
        msg = self.request(MType.GET_REQ, body)
        if msg.mtype is not MType.GET_RESP:
            raise Malformed(f"expected GET_RESP, got {msg.mtype.name}")
        meta, payload = decode_get_resp(msg.body)
        if validate:
            got_key, _ = decode_object(payload)
            if got_key != key:
                raise CorruptObject("key mismatch", f"asked for {key}, got {got_key}")
        return GetResult(meta, payload)

    def stats(self) -> dict:
        return self.request(MType.STATS_REQ, b"{}").json()

    def ping(self) -> bool:
        return self.request(MType.PING, b"{}").mtype is MType.PONG

    def set_config(self, param: str, value) -> dict:
        return self.request(MType.CONFIG_SET, dump_json({"param": param, "value": value})).json()

    def subscribe(self, min_severity: str) -> dict:
        return self.request(MType.SUB_REQ, dump_json({"min_severity": min_severity})).json()

    def next_event(self, timeout: Optional[float] = None) -> Optional[str]:
        """Next pushed event XML line, or None if none arrives within ``timeout``."""
        if self.events:
            return self.events.popleft()
        self.sock.settimeout(timeout)
        try:
            msg = self._read()
        except socket.timeout:
            return None
        finally:
            self.sock.settimeout(self.timeout)
        if msg.mtype is not MType.EVENT:
            raise Malformed(f"unsolicited {msg.mtype.name} frame")
        return msg.body.decode("utf-8")


class UpstreamClient:
    """Fetches objects from a parent server over one reused connection.

    Requests are serialized; any transport failure drops the connection so
    the next call reconnects.
    """

    def __init__(self, addr):
        self.addr = parse_addr(addr)
        self._lock = threading.Lock()
        self._conn: Optional[DanClient] = None
        self.corrupt = 0
        self.reconnects = 0

    def _drop(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def get(self, key: CalibKey, timeout_s: float) -> bytes:
        with self._lock:
            reused = self._conn is not None
            try:
                return self._get_locked(key, timeout_s)
            except BackendUnavailable:
                # a relayed error keeps the connection; only a dead one is retried
                if not reused or self._conn is not None:
                    raise
            # the parent may have restarted since the last request; retry once
            return self._get_locked(key, timeout_s)

    def _get_locked(self, key: CalibKey, timeout_s: float) -> bytes:
        where = f"upstream {self.addr[0]}:{self.addr[1]}"
        try:
            if self._conn is None:
                self._conn = DanClient(self.addr, timeout=timeout_s)
                self.reconnects += 1
            else:
                self._conn.settimeout(timeout_s)
            return self._conn.get(key, validate=True).payload
        except socket.timeout:
            self._drop()
            raise FetchTimeout(f"{where} timed out") from None
        except CorruptObject as exc:
            self._drop()
            self.corrupt += 1
            raise InternalError(f"{where} sent a corrupt object: {exc}") from None
        except Malformed as exc:
            self._drop()
            raise InternalError(f"{where} protocol error: {exc}") from None
        except DanError:
            # the upstream answered cleanly; the connection stays usable
            raise
        except (OSError, ConnectionError) as exc:
            self._drop()
            raise BackendUnavailable(f"{where} unreachable: {exc}") from None

    def close(self) -> None:
        with self._lock:
            self._drop()
