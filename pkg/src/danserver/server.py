"""TCP server: accept loop, per-connection handlers and request dispatch."""

from __future__ import annotations

import dataclasses
import logging
import socket
import threading
import time
from typing import Optional

from .backend import ConnectionPool, DataSourceSpec, FileBackend
from .broker import Broker, Mode, direct_origin
from .cache import L1Cache, L2Cache, TieredCache
from .client import UpstreamClient
from .config import ServerConfig
from .errors import DanError, InternalError, Malformed
from .model import CalibKey
from .monitor import Monitor, Severity, conservation_holds, event_to_xml
from .protocol import (
    Message,
    MType,
    dump_json,
    encode_frame,
    encode_get_resp_parts,
    error_body,
    format_addr,
    parse_addr,
    read_frame,
)
from .schemagen import load_descriptors

log = logging.getLogger(__name__)

ADMIN_PARAMS = (
    "l1_budget_bytes",
    "pool.max_connections",
    "broker.max_inflight_keys",
    "monitor.min_log_severity",
)


class _Connection:
    """Socket plus the lock that keeps responses and pushed events whole."""

    def __init__(self, sock: socket.socket, peer):
        self.sock = sock
        self.peer = peer
        self.write_lock = threading.Lock()
        self.closed = False
        self.pump: Optional[threading.Thread] = None
        self.responses = 0

    def send(self, *chunks: bytes) -> None:
        with self.write_lock:
            for chunk in chunks:
                self.sock.sendall(chunk)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def _int_param(value, name: str) -> int:
    if type(value) is not int or value < 1:
        raise Malformed(f"{name} needs a positive integer, got {value!r}")
    return value


class DanServer:
    """One middle-tier server: cache tiers, broker, monitor and the listener.

    In DIRECT mode misses go to the file backend through the session pool; in
    PROXY mode they go to the upstream server named in the config.
    """

    def __init__(self, config: ServerConfig):
        self.config = config
        mc = config.monitor
        self.monitor = Monitor(
            event_log_path=mc.event_log_path,
            min_log_severity=Severity.parse(mc.min_log_severity),
            thresholds=mc.thresholds,
            queue_size=mc.subscriber_queue,
        )
        self.backend: Optional[FileBackend] = None
        self.pool: Optional[ConnectionPool] = None
        self.upstream: Optional[UpstreamClient] = None
        if config.mode is Mode.DIRECT:
            descriptors = load_descriptors(config.descriptors_dir) if config.descriptors_dir else {}
            bc = config.backend
            self.backend = FileBackend(
                DataSourceSpec(bc.root_dir, bc.simulated_latency_ms, bc.fail_switch), descriptors
            )
            self.pool = ConnectionPool(config.pool)
            origin = direct_origin(self.backend, self.pool)
        else:
            self.upstream = UpstreamClient(config.upstream_addr)
            origin = self.upstream.get
        self.cache = TieredCache(
            L1Cache(config.l1_budget_bytes),
            L2Cache(config.l2.dir, config.l2.budget_bytes, monitor=self.monitor),
        )
        self.broker = Broker(config.broker, self.cache, origin, self.monitor)
        self.started = time.monotonic()
        self._admin_lock = threading.Lock()
        self._conns: set[_Connection] = set()
        self._conns_lock = threading.Lock()
        self._listener: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._closed = threading.Event()

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "DanServer":
        host, port = parse_addr(self.config.listen_addr)
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(256)
        self._listener = listener
        self._accept_thread = threading.Thread(target=self._accept_loop, name="dan-accept", daemon=True)
        self._accept_thread.start()
        self.monitor.event("INFO", "server", "server.started", addr=format_addr(self.address),
                           mode=self.config.mode.value)
        return self

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    @property
    def addr(self) -> str:
        return format_addr(self.address)

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._closed.wait(timeout)

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._listener.close()
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2)
        if self.upstream is not None:
            self.upstream.close()
        self.monitor.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock, peer = self._listener.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(sock, peer)
            with self._conns_lock:
                if self._closed.is_set():
                    conn.close()
                    break
                self._conns.add(conn)
            threading.Thread(target=self._handle, args=(conn,), name=f"dan-conn-{peer[1]}",
                             daemon=True).start()

    # -- per connection -----------------------------------------------------

    def _handle(self, conn: _Connection) -> None:
        try:
            while not conn.closed:
                try:
                    msg = read_frame(conn.sock)
                except Malformed as exc:
                    conn.send(encode_frame(MType.ERROR, error_body(Malformed.code, str(exc))))
                    break
                if msg is None:
                    break
                self._dispatch(conn, msg)
        except (OSError, ConnectionError):
            pass
        finally:
            self.monitor.unsubscribe(conn)
            conn.close()
            with self._conns_lock:
                self._conns.discard(conn)

    def _dispatch(self, conn: _Connection, msg: Message) -> None:
        try:
            frames = self.serve_request(conn, msg)
        except DanError as exc:
            frames = [encode_frame(MType.ERROR, error_body(exc.code, str(exc)))]
        except Exception as exc:
            log.exception("request handling failed")
            frames = [encode_frame(MType.ERROR, error_body(InternalError.code, f"{type(exc).__name__}: {exc}"))]
        conn.send(*frames)
        conn.responses += 1

    def serve_request(self, conn, msg: Message) -> list[bytes]:
        """Frames (as byte chunks) making up the single response to ``msg``."""
        mt = msg.mtype
        if mt is MType.GET_REQ:
            key = _parse_key(msg.json())
            outcome = self.broker.fetch(key)
            meta = {
                "status": "OK",
                "source": outcome.source.value,
                "coalesced": outcome.coalesced,
                "latency_ms": round(outcome.latency_ms, 3),
                "size_bytes": len(outcome.payload),
            }
            return list(encode_get_resp_parts(meta, outcome.payload))
        if mt is MType.PING:
            return [encode_frame(MType.PONG, b"{}")]
        if mt is MType.STATS_REQ:
            return [encode_frame(MType.STATS_RESP, dump_json(self.stats_snapshot()))]
        if mt is MType.CONFIG_SET:
            doc = msg.json()
            if "param" not in doc or "value" not in doc:
                raise Malformed("CONFIG_SET needs param and value")
            ack = self.admin_set(doc["param"], doc["value"])
            return [encode_frame(MType.CONFIG_ACK, dump_json(ack))]
        if mt is MType.SUB_REQ:
            doc = msg.json()
            sev = Severity.parse(doc.get("min_severity", ""))
            self._subscribe(conn, sev)
            return [encode_frame(MType.CONFIG_ACK, dump_json({"subscribed": sev.name}))]
        raise Malformed(f"{mt.name} is not a request type")

    def _subscribe(self, conn: _Connection, sev: Severity) -> None:
        sub = self.monitor.subscribe(conn, sev)
        if conn.pump is None:
            def pump():
                while not conn.closed:
                    ev = sub.get(timeout=0.5)
                    if ev is None:
                        if sub.closed:
                            return
                        continue
                    try:
                        conn.send(encode_frame(MType.EVENT, event_to_xml(ev).encode("utf-8")))
                    except OSError:
                        return

            conn.pump = threading.Thread(target=pump, name="dan-events", daemon=True)
            conn.pump.start()

    # -- admin and stats ----------------------------------------------------

    def admin_set(self, param: str, value) -> dict:
        with self._admin_lock:
            if param == "l1_budget_bytes":
                n = _int_param(value, param)
                self.cache.l1.set_budget(n)
                self.config.l1_budget_bytes = n
            elif param == "pool.max_connections":
                n = _int_param(value, param)
                if self.pool is None:
                    raise Malformed("no backend pool in PROXY mode")
                self.pool.set_max_connections(n)
            elif param == "broker.max_inflight_keys":
                self.broker.set_max_inflight_keys(_int_param(value, param))
            elif param == "monitor.min_log_severity":
                sev = Severity.parse(value)
                self.monitor.set_min_log_severity(sev)
                self.config.monitor.min_log_severity = sev.name
                value = sev.name
            else:
                raise Malformed(f"unknown config parameter {param!r}")
        self.monitor.event("INFO", "admin", "config.changed", param=param, value=value)
        return {"ok": True, "param": param, "value": value}

    def stats_snapshot(self) -> dict:
        snap = self.monitor.counters.snapshot()
        uptime = max(time.monotonic() - self.started, 1e-9)
        served = snap["requests_total"] - snap["errors_total"]
        snap["uptime_s"] = uptime
        snap["rates"] = {
            "requests_per_hour": snap["requests_total"] * 3600.0 / uptime,
            "mean_response_bytes": snap["bytes_served"] / served if served else 0.0,
        }
        snap["conservation_ok"] = conservation_holds(snap)
        snap["cache"] = dataclasses.asdict(self.cache.stats())
        snap["pool"] = dataclasses.asdict(self.pool.state()) if self.pool is not None else None
        snap["broker"] = {
            "inflight_keys": self.broker.inflight_count,
            "peak_inflight_keys": self.broker.peak_inflight,
        }
        snap["monitor"] = {
            "subscribers": self.monitor.subscriber_count,
            "log_failures": self.monitor.log_failures,
        }
        snap["mode"] = self.config.mode.value
        snap["config"] = self.config.to_dict()
        return snap


def _parse_key(doc: dict) -> CalibKey:
    try:
        table = doc["table"]
        run = doc["run"]
    except KeyError as exc:
        raise Malformed(f"GET_REQ missing field {exc.args[0]!r}") from None
    variant = doc.get("variant", "")
    if not isinstance(table, str) or not isinstance(variant, str) or type(run) is not int:
        raise Malformed("GET_REQ fields have the wrong types")
    try:
        return CalibKey(table, run, variant)
    except ValueError as exc:
        raise Malformed(str(exc)) from None
