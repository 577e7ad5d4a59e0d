"""Length-prefixed message framing.

A frame is ``u32 BE length`` followed by ``length`` bytes: one message-type
byte and the body.  Bodies are compact UTF-8 JSON, except GET_RESP which is
``u32 BE meta length + JSON meta + raw object bytes``.
"""

from __future__ import annotations

import enum
import json
import socket
import struct
from dataclasses import dataclass
from typing import Optional, Union

from .errors import LimitExceeded, Malformed

MAX_FRAME = 64 * 1024 * 1024
HEADER = struct.Struct(">I")
_U32 = struct.Struct(">I")


class MType(enum.IntEnum):
    GET_REQ = 0x01
    GET_RESP = 0x02
    SUB_REQ = 0x03
    EVENT = 0x04
    STATS_REQ = 0x05
    STATS_RESP = 0x06
    CONFIG_SET = 0x07
    CONFIG_ACK = 0x08
    PING = 0x09
    PONG = 0x0A
    ERROR = 0x7F


_MTYPES = frozenset(int(m) for m in MType)


@dataclass(frozen=True)
class Message:
    mtype: MType
    body: bytes

    def json(self) -> dict:
        try:
            doc = json.loads(self.body.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise Malformed(f"body is not JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise Malformed("body must be a JSON object")
        return doc


def dump_json(doc) -> bytes:
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def frame_header(mtype: int, body_len: int) -> bytes:
    length = 1 + body_len
    if length > MAX_FRAME:
        raise LimitExceeded(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(length) + bytes((int(mtype),))


def encode_frame(mtype: int, body: bytes = b"") -> bytes:
    return frame_header(mtype, len(body)) + body


NEED_MORE = None


def _check_header(length: int, mtype: Optional[int]) -> None:
    if length == 0:
        raise Malformed("frame length 0")
    if length > MAX_FRAME:
        raise Malformed(f"frame length {length} exceeds {MAX_FRAME}")
    if mtype is not None and mtype not in _MTYPES:
        raise Malformed(f"unknown message type 0x{mtype:02x}")


def decode_frame(buf: bytearray) -> Optional[Message]:
    """Pop one frame off the front of ``buf``.

    Returns ``NEED_MORE`` (None) and leaves ``buf`` untouched when the frame
    is incomplete; raises ``Malformed`` for a bad header.
    """
    if len(buf) < 4:
        return NEED_MORE
    (length,) = HEADER.unpack_from(buf, 0)
    _check_header(length, buf[4] if len(buf) > 4 else None)
    if len(buf) < 4 + length:
        return NEED_MORE
    msg = Message(MType(buf[4]), bytes(buf[5:4 + length]))
    del buf[:4 + length]
    return msg


# GET_RESP meta fields, in wire order
GET_META_FIELDS = ("status", "source", "coalesced", "latency_ms", "size_bytes")


def encode_get_resp_parts(meta: dict, payload: bytes) -> tuple[bytes, bytes]:
    """Frame prefix (header, type, meta) and payload, kept apart to avoid a copy."""
    ordered = {k: meta[k] for k in GET_META_FIELDS if k in meta}
    ordered.update((k, v) for k, v in meta.items() if k not in ordered)
    meta_bytes = dump_json(ordered)
    body_len = 4 + len(meta_bytes) + len(payload)
    return frame_header(MType.GET_RESP, body_len) + _U32.pack(len(meta_bytes)) + meta_bytes, payload


def encode_get_resp(meta: dict, payload: bytes) -> bytes:
    prefix, payload = encode_get_resp_parts(meta, payload)
    return prefix + payload


def decode_get_resp(body: bytes) -> tuple[dict, bytes]:
    if len(body) < 4:
        raise Malformed("GET_RESP body shorter than its meta length")
    (meta_len,) = _U32.unpack_from(body, 0)
    if 4 + meta_len > len(body):
        raise Malformed("GET_RESP meta length overruns the frame")
    try:
        meta = json.loads(bytes(body[4:4 + meta_len]).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise Malformed(f"GET_RESP meta is not JSON: {exc}") from None
    return meta, bytes(body[4 + meta_len:])


def error_body(code: int, message: str) -> bytes:
    return dump_json({"code": int(code), "message": message})


# -- blocking socket helpers --------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytearray]:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            if got == 0:
                return None
            raise ConnectionError("peer closed mid-frame")
        got += k
    return buf


def read_frame(sock: socket.socket) -> Optional[Message]:
    """Read one frame; None on a clean EOF between frames."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = HEADER.unpack_from(head, 0)
    # reject a bad length before waiting on bytes that may never come
    _check_header(length, None)
    rest = _recv_exact(sock, length)
    if rest is None:
        raise ConnectionError("peer closed mid-frame")
    _check_header(length, rest[0])
    return Message(MType(rest[0]), bytes(rest[1:]))


def send_frame(sock: socket.socket, mtype: int, body: Union[bytes, bytearray] = b"") -> None:
    head = frame_header(mtype, len(body))
    if len(body) < 65536:
        sock.sendall(head + body)
    else:
        sock.sendall(head)
        sock.sendall(body)


def parse_addr(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, sep, port = str(addr).rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"
