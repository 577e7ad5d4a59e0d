"""Server configuration loaded from a single JSON document.

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .backend import PoolConfig
from .broker import BrokerConfig, Mode
from .monitor import Severity, ThresholdRule


class ConfigError(ValueError):
    pass


@dataclass
class BackendConfig:
    root_dir: str
    simulated_latency_ms: int = 0
    fail_switch: bool = False


@dataclass
class L2Config:
    dir: str
    budget_bytes: int = 1 << 30


@dataclass
class MonitorConfig:
    event_log_path: Optional[str] = None
    min_log_severity: str = "INFO"
    thresholds: list = field(default_factory=list)
    subscriber_queue: int = 1024


@dataclass
class ServerConfig:
    listen_addr: str
    mode: Mode
    l2: L2Config
    backend: Optional[BackendConfig] = None
    upstream_addr: Optional[str] = None
    pool: PoolConfig = field(default_factory=PoolConfig)
    l1_budget_bytes: int = 256 << 20
    broker: BrokerConfig = field(default_factory=BrokerConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    descriptors_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ServerConfig":
        base = Path(base_dir) if base_dir is not None else Path.cwd()

        def path(p):
            if p is None:
                return None
            p = Path(p)
            return str(p if p.is_absolute() else base / p)

        def section(name, required=False):
            value = doc.get(name)
            if value is None:
                if required:
                    raise ConfigError(f"missing section {name!r}")
                return {}
            if not isinstance(value, dict):
                raise ConfigError(f"{name!r} must be an object")
            return value

        known = {
            "listen_addr", "mode", "upstream_addr", "backend", "pool", "l1_budget_bytes",
            "l2", "broker", "monitor", "descriptors_dir",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            mode = Mode(str(doc.get("mode", "DIRECT")).upper())
            backend = None
            if mode is Mode.DIRECT:
                b = section("backend", required=True)
                backend = BackendConfig(
                    root_dir=path(b["root_dir"]),
                    simulated_latency_ms=_nonneg(b.get("simulated_latency_ms", 0), "simulated_latency_ms"),
                    fail_switch=bool(b.get("fail_switch", False)),
                )
            upstream = doc.get("upstream_addr")
            if mode is Mode.PROXY and not upstream:
                raise ConfigError("PROXY mode requires upstream_addr")
            p = section("pool")
            pool = PoolConfig(
                max_connections=int(p.get("max_connections", 4)),
                acquire_timeout_ms=int(p.get("acquire_timeout_ms", 5000)),
            )
            l2 = section("l2", required=True)
            br = section("broker")
            broker = BrokerConfig(
                mode=mode,
                max_inflight_keys=int(br.get("max_inflight_keys", 256)),
                fetch_timeout_ms=int(br.get("fetch_timeout_ms", 30000)),
            )
            m = section("monitor")
            rules = [
                ThresholdRule(str(r["counter"]), float(r["window_s"]), int(r["limit"]))
                for r in m.get("thresholds", [])
            ]
            monitor = MonitorConfig(
                event_log_path=path(m.get("event_log_path")),
                min_log_severity=Severity.parse(m.get("min_log_severity", "INFO")).name,
                thresholds=rules,
                subscriber_queue=int(m.get("subscriber_queue", 1024)),
            )
            cfg = cls(
                listen_addr=str(doc.get("listen_addr", "127.0.0.1:0")),
                mode=mode,
                upstream_addr=upstream,
                backend=backend,
                pool=pool,
                l1_budget_bytes=_positive(doc.get("l1_budget_bytes", 256 << 20), "l1_budget_bytes"),
                l2=L2Config(dir=path(l2["dir"]), budget_bytes=_positive(l2.get("budget_bytes", 1 << 30), "l2.budget_bytes")),
                broker=broker,
                monitor=monitor,
                descriptors_dir=path(doc.get("descriptors_dir")),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        if cfg.backend is not None and not Path(cfg.backend.root_dir).is_dir():
            raise ConfigError(f"backend root_dir {cfg.backend.root_dir} does not exist")
        if cfg.descriptors_dir is not None and not Path(cfg.descriptors_dir).is_dir():
            raise ConfigError(f"descriptors_dir {cfg.descriptors_dir} does not exist")
        return cfg

    @classmethod
    def load(cls, path) -> "ServerConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        doc = {
            "listen_addr": self.listen_addr,
            "mode": self.mode.value,
            "upstream_addr": self.upstream_addr,
            "backend": None,
            "pool": {
                "max_connections": self.pool.max_connections,
                "acquire_timeout_ms": self.pool.acquire_timeout_ms,
            },
            "l1_budget_bytes": self.l1_budget_bytes,
            "l2": {"dir": self.l2.dir, "budget_bytes": self.l2.budget_bytes},
            "broker": {
                "max_inflight_keys": self.broker.max_inflight_keys,
                "fetch_timeout_ms": self.broker.fetch_timeout_ms,
            },
            "monitor": {
                "event_log_path": self.monitor.event_log_path,
                "min_log_severity": self.monitor.min_log_severity,
                "thresholds": [
                    {"counter": r.counter, "window_s": r.window_s, "limit": r.limit}
                    for r in self.monitor.thresholds
                ],
                "subscriber_queue": self.monitor.subscriber_queue,
            },
            "descriptors_dir": self.descriptors_dir,
        }
        if self.backend is not None:
            doc["backend"] = {
                "root_dir": self.backend.root_dir,
                "simulated_latency_ms": self.backend.simulated_latency_ms,
                "fail_switch": self.backend.fail_switch,
            }
        return copy.deepcopy(doc)


def _positive(value, name: str) -> int:
    if type(value) is not int or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return value


def _nonneg(value, name: str) -> int:
    if type(value) is not int or value < 0:
        raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
    return value
