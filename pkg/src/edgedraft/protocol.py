"""Binary device<->server message set and framing.

This layout is the wire contract (see README for the normative table):

    frame    := length:u32 || body          (length = exact body size)
    body     := type:u8 || payload          (all integers big-endian)

    0x01 SessionInit    session_id:u64 || tokens:list || name:str
    0x02 VerifyRequest  session_id:u64 || request_id:u64 || base_position:u64
                        || count:u16 || token:u32 * count || prob:f64 * count
    0x03 VerifyResponse session_id:u64 || request_id:u64 || accepted:u16
                        || has_corrective:u8 || corrective:u32
    0x04 SessionClose   session_id:u64

    list := count:u16 || token:u32 * count      str := len:u16 || utf8 bytes

A VerifyRequest body is exactly 1+8+8+8+2+12*count bytes: tokens travel, not
activations.  Truncated is a resumable stream state; Malformed is
connection-fatal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import Malformed, OversizeList, Truncated

MSG_SESSION_INIT = 0x01
MSG_VERIFY_REQUEST = 0x02
MSG_VERIFY_RESPONSE = 0x03
MSG_SESSION_CLOSE = 0x04

_U16_MAX = 0xFFFF
_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_RESP_TAIL = struct.Struct(">HBI")


@dataclass(frozen=True)
class SessionInit:
    session_id: int
    prompt_tokens: tuple[int, ...]
    draft_model_name: str


@dataclass(frozen=True)
class VerifyRequest:
    session_id: int
    request_id: int
    base_position: int
    tokens: tuple[int, ...]
    draft_probs: tuple[float, ...]


@dataclass(frozen=True)
class VerifyResponse:
    session_id: int
    request_id: int
    accepted_count: int
    corrective_token: int | None = None


@dataclass(frozen=True)
class SessionClose:
    session_id: int


Message = SessionInit | VerifyRequest | VerifyResponse | SessionClose


def _pack_tokens(tokens: tuple[int, ...]) -> bytes:
    if len(tokens) > _U16_MAX:
        raise OversizeList(f"token list of {len(tokens)} exceeds u16 capacity")
    return struct.pack(f">H{len(tokens)}I", len(tokens), *tokens)


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > _U16_MAX:
        raise OversizeList("string exceeds u16 byte capacity")
    return struct.pack(">H", len(raw)) + raw


def encode(msg: Message) -> bytes:
    if isinstance(msg, SessionInit):
        body = (
            bytes([MSG_SESSION_INIT])
            + _U64.pack(msg.session_id)
            + _pack_tokens(msg.prompt_tokens)
            + _pack_str(msg.draft_model_name)
        )
    elif isinstance(msg, VerifyRequest):
        n = len(msg.tokens)
        if n != len(msg.draft_probs):
            raise Malformed("token and probability lists differ in length")
        if n == 0:
            raise Malformed("verification request must carry at least one token")
        if n > _U16_MAX:
            raise OversizeList(f"token list of {n} exceeds u16 capacity")
        body = bytes([MSG_VERIFY_REQUEST]) + struct.pack(
            f">QQQH{n}I{n}d",
            msg.session_id,
            msg.request_id,
            msg.base_position,
            n,
            *msg.tokens,
            *msg.draft_probs,
        )
    elif isinstance(msg, VerifyResponse):
        has = msg.corrective_token is not None
        body = bytes([MSG_VERIFY_RESPONSE]) + struct.pack(
            ">QQHBI",
            msg.session_id,
            msg.request_id,
            msg.accepted_count,
            1 if has else 0,
            msg.corrective_token if has else 0,
        )
    elif isinstance(msg, SessionClose):
        body = bytes([MSG_SESSION_CLOSE]) + _U64.pack(msg.session_id)
    else:
        raise Malformed(f"cannot encode {type(msg).__name__}")
    return _LEN.pack(len(body)) + body


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: bytes, pos: int, end: int):
        self.buf = buf
        self.pos = pos
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise Malformed("field runs past the frame boundary")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")


def decode(data: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at `offset`; returns (message, bytes consumed).

    Raises Truncated when the buffer holds less than a whole frame.
    """
    if len(data) - offset < 4:
        raise Truncated("need frame length")
    (length,) = _LEN.unpack_from(data, offset)
    if length < 1:
        raise Malformed("empty frame body")
    if len(data) - offset < 4 + length:
        raise Truncated("need whole frame body")
    end = offset + 4 + length
    r = _Reader(data, offset + 5, end)
    kind = data[offset + 4]
    if kind == MSG_SESSION_INIT:
        session = r.u64()
        count = r.u16()
        tokens = struct.unpack(f">{count}I", r.take(4 * count))
        name_len = r.u16()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Malformed("draft model name is not valid UTF-8") from exc
        msg: Message = SessionInit(session, tokens, name)
    elif kind == MSG_VERIFY_REQUEST:
        session = r.u64()
        request = r.u64()
        base = r.u64()
        count = r.u16()
        if count == 0:
            raise Malformed("verification request with empty token list")
        tokens = struct.unpack(f">{count}I", r.take(4 * count))
        probs = struct.unpack(f">{count}d", r.take(8 * count))
        msg = VerifyRequest(session, request, base, tokens, probs)
    elif kind == MSG_VERIFY_RESPONSE:
        session = r.u64()
        request = r.u64()
        accepted, flag, corrective = _RESP_TAIL.unpack(r.take(_RESP_TAIL.size))
        if flag not in (0, 1):
            raise Malformed(f"corrective flag byte {flag:#04x}")
        if flag == 0 and corrective != 0:
            raise Malformed("corrective token present with flag unset")
        msg = VerifyResponse(session, request, accepted,
                             corrective if flag else None)
    elif kind == MSG_SESSION_CLOSE:
        msg = SessionClose(r.u64())
    else:
        raise Malformed(f"unknown message type {kind:#04x}")
    if r.pos != end:
        raise Malformed("frame length does not match message payload")
    return msg, 4 + length


def decode_stream(data: bytes) -> tuple[list[Message], int]:
    """Decode as many whole frames as the buffer holds; returns (messages,
    bytes consumed) so callers can keep the tail."""
    out: list[Message] = []
    offset = 0
    while True:
        try:
            msg, used = decode(data, offset)
        except Truncated:
            return out, offset
        out.append(msg)
        offset += used
