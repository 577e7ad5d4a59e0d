"""Keys, row sets and the canonical binary object encoding.

Layout of an encoded object (all integers big-endian)::

    "DAN1"
    u16 len + table (UTF-8)
    u64 run
    u16 len + variant (UTF-8)
    u16 column count, then per column: u16 len + name, u8 type (1 INT, 2 FLOAT, 3 STRING)
    u32 row count, then rows: i64 | f64 | (u32 len + UTF-8) per value
    u32 CRC-32 of every preceding byte

Encoding is deterministic, so equal inputs give byte-identical payloads.
"""

from __future__ import annotations

import enum
import re
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import CorruptObject, LimitExceeded

MAGIC = b"DAN1"
MAX_OBJECT_BYTES = 64 * 1024 * 1024
MIN_OBJECT_BYTES = 4 + 2 + 8 + 2 + 2 + 4 + 4

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF


class CType(enum.IntEnum):
    INT = 1
    FLOAT = 2
    STRING = 3


_PACK_CODE = {CType.INT: "q", CType.FLOAT: "d"}
_PY_TYPE = {CType.INT: int, CType.FLOAT: float, CType.STRING: str}


def _has_control_chars(s: str) -> bool:
    return any(ord(c) < 0x20 or 0x7F <= ord(c) < 0xA0 for c in s)


@dataclass(frozen=True, order=True)
class CalibKey:
    table: str
    run: int
    variant: str = ""

    def __post_init__(self):
        if not isinstance(self.table, str) or not self.table:
            raise ValueError("table must be a non-empty string")
        if _has_control_chars(self.table):
            raise ValueError(f"table {self.table!r} contains control characters")
        if type(self.run) is not int or not 0 <= self.run <= _U64_MAX:
            raise ValueError(f"run must be an unsigned 64-bit integer, got {self.run!r}")
        if not isinstance(self.variant, str):
            raise ValueError("variant must be a string")

    def __str__(self) -> str:
        return cache_key_string(self)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    ctype: CType

    def __post_init__(self):
        object.__setattr__(self, "ctype", CType(self.ctype))


@dataclass(frozen=True)
class RowSet:
    columns: tuple[ColumnSpec, ...]
    rows: tuple[tuple, ...]

    def __init__(self, columns: Iterable[ColumnSpec], rows: Iterable[Sequence] = ()):
        object.__setattr__(self, "columns", tuple(columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in rows))

    @classmethod
    def _trusted(cls, columns: tuple, rows: list) -> "RowSet":
        # decode path: rows are already tuples of the right kinds
        obj = cls.__new__(cls)
        object.__setattr__(obj, "columns", columns)
        object.__setattr__(obj, "rows", tuple(rows))
        return obj

    def validate(self) -> None:
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate column names in {names}")
        ncol = len(self.columns)
        if ncol == 0 and self.rows:
            raise ValueError("a row set without columns cannot hold rows")
        kinds = [_PY_TYPE[c.ctype] for c in self.columns]
        for i, row in enumerate(self.rows):
            if len(row) != ncol:
                raise ValueError(f"row {i} has {len(row)} values, expected {ncol}")
            for value, kind in zip(row, kinds):
                if type(value) is not kind:
                    raise ValueError(
                        f"row {i}: {value!r} is not of column type {kind.__name__}"
                    )


@dataclass(frozen=True)
class CalibObject:
    key: CalibKey
    payload: bytes

    @property
    def size_bytes(self) -> int:
        return len(self.payload)

    @property
    def checksum(self) -> int:
        return _U32.unpack_from(self.payload, len(self.payload) - 4)[0]

    @classmethod
    def from_rows(cls, key: CalibKey, rows: RowSet) -> "CalibObject":
        return cls(key, encode_object(key, rows))


def crc32(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def payload_checksum(payload) -> int:
    """Trailer value stored in an encoded object."""
    return _U32.unpack_from(payload, len(payload) - 4)[0]


def _short_str(s: str, what: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > _U16_MAX:
        raise LimitExceeded(f"{what} is {len(raw)} bytes, limit {_U16_MAX}")
    return _U16.pack(len(raw)) + raw


def encode_object(key: CalibKey, rows: RowSet) -> bytes:
    rows.validate()
    nrows = len(rows.rows)
    if nrows > _U32_MAX:
        raise LimitExceeded(f"{nrows} rows exceed the u32 row count")

    parts = [
        MAGIC,
        _short_str(key.table, "table"),
        _U64.pack(key.run),
        _short_str(key.variant, "variant"),
        _U16.pack(len(rows.columns)),
    ]
    if len(rows.columns) > _U16_MAX:
        raise LimitExceeded("too many columns")
    for col in rows.columns:
        parts.append(_short_str(col.name, "column name"))
        parts.append(bytes((int(col.ctype),)))
    parts.append(_U32.pack(nrows))
    head = sum(map(len, parts))

    if nrows and all(c.ctype in _PACK_CODE for c in rows.columns):
        packer = struct.Struct(">" + "".join(_PACK_CODE[c.ctype] for c in rows.columns))
        if head + nrows * packer.size + 4 > MAX_OBJECT_BYTES:
            raise LimitExceeded("encoded object exceeds 64 MiB")
        pack = packer.pack
        try:
            parts.append(b"".join([pack(*r) for r in rows.rows]))
        except struct.error as exc:
            raise LimitExceeded(f"value out of range: {exc}") from None
    elif nrows:
        parts.append(_encode_rows_mixed(rows, MAX_OBJECT_BYTES - head - 4))

    body = b"".join(parts)
    if len(body) + 4 > MAX_OBJECT_BYTES:
        raise LimitExceeded("encoded object exceeds 64 MiB")
    return body + _U32.pack(crc32(body))


def _encode_rows_mixed(rows: RowSet, room: int) -> bytes:
    packers = []
    for col in rows.columns:
        if col.ctype is CType.STRING:
            packers.append(None)
        else:
            packers.append(struct.Struct(">" + _PACK_CODE[col.ctype]).pack)
    out = bytearray()
    for row in rows.rows:
        for value, pack in zip(row, packers):
            if pack is None:
                raw = value.encode("utf-8")
                if len(raw) > _U32_MAX:
                    raise LimitExceeded("string value exceeds u32 length")
                out += _U32.pack(len(raw))
                out += raw
            else:
                try:
                    out += pack(value)
                except struct.error as exc:
                    raise LimitExceeded(f"value out of range: {exc}") from None
        if len(out) > room:
            raise LimitExceeded("encoded object exceeds 64 MiB")
    return bytes(out)


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: memoryview, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> memoryview:
        if self.pos + n > self.end:
            raise CorruptObject("length overrun", f"need {n} bytes at offset {self.pos}")
        view = self.buf[self.pos:self.pos + n]
        self.pos += n
        return view

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self, n: int) -> str:
        try:
            return str(self.take(n), "utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptObject("invalid utf-8", str(exc)) from None


def decode_object(payload) -> tuple[CalibKey, RowSet]:
    buf = memoryview(payload).cast("B")
    size = len(buf)
    if size < 4 or bytes(buf[:4]) != MAGIC:
        raise CorruptObject("bad magic")
    if size < MIN_OBJECT_BYTES:
        raise CorruptObject("truncated", f"{size} bytes")
    if size > MAX_OBJECT_BYTES:
        raise CorruptObject("length overrun", "object exceeds 64 MiB")
    stored = _U32.unpack_from(buf, size - 4)[0]
    if crc32(buf[:size - 4]) != stored:
        raise CorruptObject("crc mismatch")

    r = _Reader(buf, size - 4)
    r.pos = 4
    table = r.text(r.u16())
    run = _U64.unpack(r.take(8))[0]
    variant = r.text(r.u16())
    try:
        key = CalibKey(table, run, variant)
    except ValueError as exc:
        raise CorruptObject("invalid key", str(exc)) from None

    ncols = r.u16()
    columns = []
    for _ in range(ncols):
        name = r.text(r.u16())
        code = r.take(1)[0]
        if code not in (1, 2, 3):
            raise CorruptObject("invalid type byte", f"{code} for column {name!r}")
        columns.append(ColumnSpec(name, CType(code)))
    columns = tuple(columns)
    nrows = r.u32()

    if nrows and all(c.ctype in _PACK_CODE for c in columns):
        unpacker = struct.Struct(">" + "".join(_PACK_CODE[c.ctype] for c in columns))
        if unpacker.size == 0:
            raise CorruptObject("length overrun", f"{nrows} rows without columns")
        data = r.take(nrows * unpacker.size)
        rows = list(unpacker.iter_unpack(data))
    elif nrows:
        rows = _decode_rows_mixed(r, columns, nrows)
    else:
        rows = []
    if r.pos != r.end:
        raise CorruptObject("trailing bytes", f"{r.end - r.pos} unread bytes before trailer")
    return key, RowSet._trusted(columns, rows)


def _decode_rows_mixed(r: _Reader, columns, nrows: int) -> list:
    fixed = {CType.INT: struct.Struct(">q"), CType.FLOAT: struct.Struct(">d")}
    readers = [fixed.get(c.ctype) for c in columns]
    # every value takes at least 4 bytes, so a bogus row count is caught cheaply
    if nrows * 4 * len(columns) > r.end - r.pos:
        raise CorruptObject("length overrun", f"row count {nrows} too large")
    rows = []
    for _ in range(nrows):
        row = []
        for st in readers:
            if st is None:
                row.append(r.text(r.u32()))
            else:
                row.append(st.unpack(r.take(st.size))[0])
        rows.append(tuple(row))
    return rows


def _esc(s: str) -> str:
    return s.replace("%", "%25").replace("/", "%2F")


def cache_key_string(key: CalibKey) -> str:
    return f"{_esc(key.table)}/{key.run}/{_esc(key.variant)}"


_UNESC = re.compile(r"%(25|2F)")


def _unesc(s: str) -> str:
    return _UNESC.sub(lambda m: "%" if m.group(1) == "25" else "/", s)


def parse_key_string(text: str) -> CalibKey:
    """Inverse of ``cache_key_string``; also accepts the CLI's ``T/N/V`` form."""
    parts = text.split("/")
    if len(parts) == 2:
        parts.append("")
    if len(parts) != 3:
        raise ValueError(f"expected table/run/variant, got {text!r}")
    table, run, variant = parts
    if not run.isdigit():
        raise ValueError(f"run must be decimal in {text!r}")
    return CalibKey(_unesc(table), int(run), _unesc(variant))
