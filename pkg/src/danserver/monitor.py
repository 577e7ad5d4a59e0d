"""Events, subscriptions, threshold rules and request counters.

Events are rendered as one self-closing XML element per line::

    <ev t="1970-01-01T00:00:00.000Z" s="I" src="broker" c="cache.hit" k="T/1/v"/>
"""

from __future__ import annotations

import collections
import datetime as dt
import enum
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

from .errors import Malformed

log = logging.getLogger(__name__)

DEFAULT_QUEUE_SIZE = 1024


class Severity(enum.IntEnum):
    DEBUG = 10
    INFO = 20
    ERROR = 40

    @property
    def letter(self) -> str:
        return self.name[0]

    @classmethod
    def parse(cls, value) -> "Severity":
        if isinstance(value, Severity):
            return value
        text = str(value).strip().upper()
        for sev in cls:
            if text in (sev.name, sev.letter):
                return sev
        raise Malformed(f"unknown severity {value!r}")


_CODE_RE = re.compile(r"[a-z_]+(\.[a-z_]+)+")
_ATTR_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.-]*")
_RESERVED_ATTRS = frozenset(("t", "s", "src", "c"))


@dataclass(frozen=True)
class Event:
    ts: float
    severity: Severity
    source: str
    code: str
    attrs: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "severity", Severity.parse(self.severity))
        if not _CODE_RE.fullmatch(self.code):
            raise ValueError(f"bad event code {self.code!r}")
        attrs = {str(k): str(v) for k, v in self.attrs.items()}
        for name in attrs:
            if not _ATTR_NAME_RE.fullmatch(name) or name in _RESERVED_ATTRS:
                raise ValueError(f"attribute name {name!r} is not usable in an event")
        object.__setattr__(self, "attrs", attrs)




def _xml_escape(value: str) -> str:
    return (
        value.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _xml_text(value: str) -> str:
    # characters XML 1.0 cannot carry are written as a literal \uXXXX;
    # tab/newline/CR become char refs so attribute normalization keeps them
    out = []
    for ch in value:
        o = ord(ch)
        if (o < 0x20 and ch not in "\t\n\r") or 0xD800 <= o <= 0xDFFF or o in (0xFFFE, 0xFFFF):
            out.append(f"\\u{o:04x}")
        elif ch in "\t\n\r":
            out.append(f"&#{o};")
        else:
            out.append(ch)
    return "".join(out)


def format_ts(ts: float) -> str:
    moment = dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%S.") + f"{moment.microsecond // 1000:03d}Z"


def event_to_xml(event: Event) -> str:
    parts = [
        f't="{format_ts(event.ts)}"',
        f's="{event.severity.letter}"',
        f'src="{_xml_text(_xml_escape(event.source))}"',
        f'c="{event.code}"',
    ]
    for name in sorted(event.attrs):
        parts.append(f'{name}="{_xml_text(_xml_escape(event.attrs[name]))}"')
    return "<ev " + " ".join(parts) + "/>"


class Subscription:
    """Bounded drop-oldest queue of events for one subscriber."""

    def __init__(self, owner, min_severity: Severity, maxsize: int = DEFAULT_QUEUE_SIZE):
        self.owner = owner
        self.min_severity = min_severity
        self.maxsize = maxsize
        self.dropped = 0
        self._queue: collections.deque[Event] = collections.deque()
        self._cond = threading.Condition()
        self.closed = False

    def offer(self, event: Event) -> None:
        with self._cond:
            if self.closed:
                return
            if len(self._queue) >= self.maxsize:
                self._queue.popleft()
                self.dropped += 1
            self._queue.append(event)
            self._cond.notify()

    def get(self, timeout: Optional[float] = None) -> Optional[Event]:
        with self._cond:
            if not self._queue and not self.closed:
                self._cond.wait(timeout)
            if self._queue:
                return self._queue.popleft()
            return None

    def drain(self) -> list[Event]:
        with self._cond:
            items = list(self._queue)
            self._queue.clear()
            return items

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def __len__(self) -> int:
        return len(self._queue)


@dataclass(frozen=True)
class ThresholdRule:
    counter: str
    window_s: float
    limit: int

    def __post_init__(self):
        if self.window_s < 1:
            raise ValueError("window_s must be >= 1")
        if self.limit < 1:
            raise ValueError("limit must be >= 1")


class ThresholdTracker:
    """Sliding event-time windows, one per rule.

    A rule fires when the increments inside ``(t - window_s, t]`` first exceed
    ``limit``; it re-arms once an observation finds the window back at or
    below the limit.
    """

    def __init__(self, rules: Iterable[ThresholdRule] = ()):
        self._lock = threading.Lock()
        self.rules: list[ThresholdRule] = []
        self._windows: list[collections.deque] = []
        self._armed: list[bool] = []
        for rule in rules:
            self.add(rule)

    def add(self, rule: ThresholdRule) -> None:
        with self._lock:
            self.rules.append(rule)
            self._windows.append(collections.deque())
            self._armed.append(True)

    def observe(self, counter: str, ts: float, n: int = 1) -> list[Event]:
        fired = []
        with self._lock:
            for idx, rule in enumerate(self.rules):
                if rule.counter != counter:
                    continue
                window = self._windows[idx]
                while window and window[0] <= ts - rule.window_s:
                    window.popleft()
                if len(window) <= rule.limit:
                    self._armed[idx] = True
                window.extend([ts] * n)
                if self._armed[idx] and len(window) > rule.limit:
                    self._armed[idx] = False
                    fired.append(
                        Event(
                            ts=time.time(),
                            severity=Severity.ERROR,
                            source="monitor",
                            code="threshold.exceeded",
                            attrs={
                                "counter": rule.counter,
                                "window_s": f"{rule.window_s:g}",
                                "limit": str(rule.limit),
                                "observed": str(len(window)),
                            },
                        )
                    )
        return fired


# Every request lands in exactly one of these buckets, which is what makes
# requests_total equal to their sum.
OUTCOME_BUCKETS = (
    "l1_hits",
    "l2_hits",
    "backend_queries",
    "upstream_queries",
    "coalesced_requests",
    "errors_total",
)

COUNTER_NAMES = ("requests_total",) + OUTCOME_BUCKETS + (
    "bytes_served",
    "origin_fetches",
    "origin_failures",
    "error_events",
    "events_dropped",
)


# extra names a threshold rule may use for a counter
COUNTER_ALIASES = {"origin_failures": ("backend.errors",)}


class Counters:
    """Monotone request counters, updated and read under a single lock."""

    def __init__(self, on_increment: Optional[Callable[[str, int], None]] = None):
        self._lock = threading.Lock()
        self._values = dict.fromkeys(COUNTER_NAMES, 0)
        self._per_table: collections.Counter[str] = collections.Counter()
        self._on_increment = on_increment

    def record_request(self, bucket: str, table: str, nbytes: int = 0) -> None:
        if bucket not in OUTCOME_BUCKETS:
            raise ValueError(f"unknown outcome bucket {bucket!r}")
        with self._lock:
            self._values["requests_total"] += 1
            self._values[bucket] += 1
            self._values["bytes_served"] += nbytes
            self._per_table[table] += 1
        if self._on_increment is not None:
            self._on_increment("requests_total", 1)
            self._on_increment(bucket, 1)

    def incr(self, name: str, n: int = 1) -> None:
        with self._lock:
            self._values[name] += n
        if self._on_increment is not None and n:
            self._on_increment(name, n)

    def snapshot(self) -> dict:
        with self._lock:
            values = dict(self._values)
            values["per_table"] = dict(sorted(self._per_table.items()))
            return values

    def __getitem__(self, name: str) -> int:
        with self._lock:
            return self._values[name]


def conservation_holds(snap: Mapping) -> bool:
    return snap["requests_total"] == sum(snap[b] for b in OUTCOME_BUCKETS)


class Monitor:
    """Fans events out to the log file and subscribers; never blocks emitters.

    Counter increments and event codes both feed the threshold rules, so a
    rule may watch either ``origin_failures`` or ``backend.error``.
    """

    def __init__(
        self,
        event_log_path=None,
        min_log_severity: Severity = Severity.INFO,
        thresholds: Iterable[ThresholdRule] = (),
        queue_size: int = DEFAULT_QUEUE_SIZE,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.queue_size = queue_size
        self.min_log_severity = Severity.parse(min_log_severity)
        self.thresholds = ThresholdTracker(thresholds)
        self.counters = Counters(on_increment=self._observe_counter)
        self._clock = clock
        self._lock = threading.Lock()
        self._subs: dict[int, Subscription] = {}
        self._log_lock = threading.Lock()
        self._log_fh = None
        self.log_failures = 0
        if event_log_path:
            self._log_fh = open(event_log_path, "a", encoding="utf-8", buffering=1)
        self._floor = self._compute_floor()

    def _compute_floor(self) -> Severity:
        levels = [s.min_severity for s in self._subs.values()]
        if self._log_fh is not None:
            levels.append(self.min_log_severity)
        return min(levels, default=Severity.ERROR)

    def set_min_log_severity(self, severity) -> None:
        with self._lock:
            self.min_log_severity = Severity.parse(severity)
            self._floor = self._compute_floor()

    def subscribe(self, owner, min_severity) -> Subscription:
        sev = Severity.parse(min_severity)
        with self._lock:
            old = self._subs.get(id(owner))
            if old is not None and old.owner is owner:
                old.min_severity = sev
                sub = old
            else:
                sub = Subscription(owner, sev, self.queue_size)
                self._subs[id(owner)] = sub
            self._floor = self._compute_floor()
        return sub

    def unsubscribe(self, owner) -> None:
        with self._lock:
            sub = self._subs.get(id(owner))
            if sub is not None and sub.owner is owner:
                del self._subs[id(owner)]
                sub.close()
            self._floor = self._compute_floor()

    @property
    def subscriber_count(self) -> int:
        return len(self._subs)

    def _observe_counter(self, name: str, n: int) -> None:
        if not self.thresholds.rules:
            return
        now = self._clock()
        for watched in (name,) + COUNTER_ALIASES.get(name, ()):
            for ev in self.thresholds.observe(watched, now, n):
                self.emit(ev)

    def event(self, severity, source: str, code: str, **attrs) -> None:
        sev = Severity.parse(severity)
        # skip building events nobody reads
        if sev < self._floor and not self.thresholds.rules:
            return
        self.emit(Event(time.time(), sev, source, code, attrs))

    def emit(self, event: Event) -> None:
        if event.severity is Severity.ERROR:
            self.counters.incr("error_events")
        with self._lock:
            subs = [s for s in self._subs.values() if event.severity >= s.min_severity]
        for sub in subs:
            before = sub.dropped
            sub.offer(event)
            if sub.dropped != before:
                self.counters.incr("events_dropped", sub.dropped - before)
        if self._log_fh is not None and event.severity >= self.min_log_severity:
            line = event_to_xml(event)
            with self._log_lock:
                try:
                    self._log_fh.write(line + "\n")
                except (OSError, ValueError):
                    self.log_failures += 1
        if self.thresholds.rules and event.code != "threshold.exceeded":
            for ev in self.thresholds.observe(event.code, self._clock()):
                self.emit(ev)

    def close(self) -> None:
        with self._lock:
            subs = list(self._subs.values())
            self._subs.clear()
        for sub in subs:
            sub.close()
        with self._log_lock:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
