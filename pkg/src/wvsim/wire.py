"""Canonical TLV codec for every protocol message.

Frame layout, all integers big-endian::

    "WVSIM1" | msg_type:u8 | { tag:u16 | length:u32 | value }*

Fields appear in strictly ascending tag order; the only repeatable field is
``key_entry`` (0x000C), whose copies are adjacent and keep their order. The
``hmac_tag`` field (0x0008), when a message carries one, is always the final
field and its 32-byte value authenticates every frame byte before it,
including its own tag/length header. Decoding rejects anything that would not
re-encode to the identical bytes, and rejects messages missing required fields.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, fields, replace
from typing import ClassVar

from .errors import MalformedFrame, UnknownMsgType

MAGIC = b"WVSIM1"
HEADER_SIZE = len(MAGIC) + 1
TLV_HEADER = struct.Struct(">HI")
MAC_SIZE = 32
KEY_ID_SIZE = 16
MAX_FRAME = 64 * 1024 * 1024


class MsgType(enum.IntEnum):
    PROV_REQ = 1
    PROV_RESP = 2
    LIC_REQ = 3
    LIC_RESP = 4
    REFRESH_REQ = 5
    REFRESH_RESP = 6
    ERROR = 0x7F


class Tag(enum.IntEnum):
    NONCE = 0x0001
    DEVICE_ID = 0x0002
    PROVISIONING_TOKEN = 0x0003
    DEVICE_BLOB = 0x0004
    REQUEST_ID = 0x0005
    IV = 0x0006
    CIPHERTEXT = 0x0007
    HMAC_TAG = 0x0008
    RSA_SIGNATURE = 0x0009
    SIG_SCHEME = 0x000A
    ENC_SESSION_KEY = 0x000B
    KEY_ENTRY = 0x000C
    NEW_SERVER_MAC_KEY_CT = 0x000D
    KEY_ID = 0x000E
    TTL = 0x000F
    ERROR_KIND = 0x0010
    ERROR_DETAIL = 0x0011


class EntryTag(enum.IntEnum):
    KEY_ID = 0x01
    IV = 0x02
    ENC_KEY = 0x03
    KCB_BLOB = 0x04
    KCB_ENCRYPTED = 0x05


# value kinds
U8 = "u8"
U32 = "u32"
BOOL = "bool"
RAW = "raw"
TEXT = "text"
KEY_IDS = "key_ids"
ENTRIES = "entries"


def _f(tag, kind=RAW, size=None, required=True, default=None):
    meta = {"tag": tag, "kind": kind, "size": size, "required": required}
    if kind == ENTRIES:
        return field(default_factory=tuple, metadata=meta)
    return field(default=default, metadata=meta)


@dataclass(frozen=True)
class KeyEntry:
    key_id: bytes = _f(EntryTag.KEY_ID, size=KEY_ID_SIZE)
    iv: bytes | None = _f(EntryTag.IV, size=16, required=False)
    enc_key: bytes | None = _f(EntryTag.ENC_KEY, required=False)
    kcb_blob: bytes = _f(EntryTag.KCB_BLOB)
    kcb_encrypted: bool = _f(EntryTag.KCB_ENCRYPTED, kind=BOOL, default=False)


@dataclass(frozen=True)
class ProvisioningRequest:
    MSG_TYPE: ClassVar[MsgType] = MsgType.PROV_REQ
    nonce: int | None = _f(Tag.NONCE, U32)
    device_id: bytes | None = _f(Tag.DEVICE_ID, size=32)
    provisioning_token: bytes | None = _f(Tag.PROVISIONING_TOKEN, size=72, required=False)
    hmac_tag: bytes | None = _f(Tag.HMAC_TAG, size=MAC_SIZE)


@dataclass(frozen=True)
class ProvisioningResponse:
    MSG_TYPE: ClassVar[MsgType] = MsgType.PROV_RESP
    nonce: int | None = _f(Tag.NONCE, U32)
    device_id: bytes | None = _f(Tag.DEVICE_ID, size=32, required=False)
    iv: bytes | None = _f(Tag.IV, size=16)
    ciphertext: bytes | None = _f(Tag.CIPHERTEXT)
    hmac_tag: bytes | None = _f(Tag.HMAC_TAG, size=MAC_SIZE)


@dataclass(frozen=True)
class LicenseRequest:
    MSG_TYPE: ClassVar[MsgType] = MsgType.LIC_REQ
    nonce: int | None = _f(Tag.NONCE, U32)
    device_id: bytes | None = _f(Tag.DEVICE_ID, size=32)
    device_blob: bytes | None = _f(Tag.DEVICE_BLOB)
    request_id: bytes | None = _f(Tag.REQUEST_ID)
    rsa_signature: bytes | None = _f(Tag.RSA_SIGNATURE)
    sig_scheme: int | None = _f(Tag.SIG_SCHEME, U8)
    key_ids: tuple[bytes, ...] | None = _f(Tag.KEY_ID, KEY_IDS)


@dataclass(frozen=True)
class LicenseResponse:
    MSG_TYPE: ClassVar[MsgType] = MsgType.LIC_RESP
    nonce: int | None = _f(Tag.NONCE, U32)
    request_id: bytes | None = _f(Tag.REQUEST_ID)
    iv: bytes | None = _f(Tag.IV, size=16, required=False)
    enc_session_key: bytes | None = _f(Tag.ENC_SESSION_KEY, size=256)
    key_entries: tuple[KeyEntry, ...] = _f(Tag.KEY_ENTRY, ENTRIES)
    new_server_mac_key_ct: bytes | None = _f(Tag.NEW_SERVER_MAC_KEY_CT, required=False)
    hmac_tag: bytes | None = _f(Tag.HMAC_TAG, size=MAC_SIZE)


@dataclass(frozen=True)
class RefreshRequest:
    MSG_TYPE: ClassVar[MsgType] = MsgType.REFRESH_REQ
    nonce: int | None = _f(Tag.NONCE, U32)
    request_id: bytes | None = _f(Tag.REQUEST_ID)
    key_id: bytes | None = _f(Tag.KEY_ID, size=KEY_ID_SIZE)
    ttl: int | None = _f(Tag.TTL, U32, required=False)
    hmac_tag: bytes | None = _f(Tag.HMAC_TAG, size=MAC_SIZE)


@dataclass(frozen=True)
class RefreshResponse:
    MSG_TYPE: ClassVar[MsgType] = MsgType.REFRESH_RESP
    nonce: int | None = _f(Tag.NONCE, U32)
    request_id: bytes | None = _f(Tag.REQUEST_ID, required=False)
    key_entries: tuple[KeyEntry, ...] = _f(Tag.KEY_ENTRY, ENTRIES)
    hmac_tag: bytes | None = _f(Tag.HMAC_TAG, size=MAC_SIZE)


@dataclass(frozen=True)
class ErrorMessage:
    MSG_TYPE: ClassVar[MsgType] = MsgType.ERROR
    kind: str | None = _f(Tag.ERROR_KIND, TEXT)
    detail: str | None = _f(Tag.ERROR_DETAIL, TEXT)


MESSAGE_TYPES = {
    cls.MSG_TYPE: cls
    for cls in (ProvisioningRequest, ProvisioningResponse, LicenseRequest, LicenseResponse,
                RefreshRequest, RefreshResponse, ErrorMessage)
}
Message = (ProvisioningRequest | ProvisioningResponse | LicenseRequest | LicenseResponse
           | RefreshRequest | RefreshResponse | ErrorMessage)


def _schema(cls):
    return [(f.name, f.metadata) for f in fields(cls)]


def _encode_value(meta, value) -> bytes:
    kind, size = meta["kind"], meta["size"]
    if kind == U32:
        if not 0 <= value <= 0xFFFFFFFF:
            raise ValueError("u32 field out of range")
        return value.to_bytes(4, "big")
    if kind == U8:
        if not 0 <= value <= 0xFF:
            raise ValueError("u8 field out of range")
        return bytes([value])
    if kind == BOOL:
        return b"\x01" if value else b"\x00"
    if kind == TEXT:
        return value.encode("utf-8")
    if kind == KEY_IDS:
        if not value or any(len(k) != KEY_ID_SIZE for k in value):
            raise ValueError("key_ids must be one or more 16-byte ids")
        return b"".join(value)
    value = bytes(value)
    if size is not None and len(value) != size:
        raise ValueError(f"field must be {size} bytes, got {len(value)}")
    return value


def _decode_value(meta, raw: bytes):
    kind, size = meta["kind"], meta["size"]
    if kind == U32:
        if len(raw) != 4:
            raise MalformedFrame("u32 field must be 4 bytes")
        return int.from_bytes(raw, "big")
    if kind == U8:
        if len(raw) != 1:
            raise MalformedFrame("u8 field must be 1 byte")
        return raw[0]
    if kind == BOOL:
        if raw not in (b"\x00", b"\x01"):
            raise MalformedFrame("flag field must be 0x00 or 0x01")
        return raw == b"\x01"
    if kind == TEXT:
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedFrame("text field is not UTF-8") from None
    if kind == KEY_IDS:
        if not raw or len(raw) % KEY_ID_SIZE:
            raise MalformedFrame("key_ids must be a non-empty multiple of 16 bytes")
        return tuple(raw[i:i + KEY_ID_SIZE] for i in range(0, len(raw), KEY_ID_SIZE))
    if size is not None and len(raw) != size:
        raise MalformedFrame(f"field must be {size} bytes, got {len(raw)}")
    return raw


def _tlv(tag: int, value: bytes) -> bytes:
    return TLV_HEADER.pack(tag, len(value)) + value


def _encode_fields(obj) -> bytes:
    out = bytearray()
    trailer = b""
    for name, meta in _schema(type(obj)):
        value = getattr(obj, name)
        if meta["kind"] == ENTRIES:
            for entry in value:
                out += _tlv(meta["tag"], _encode_fields(entry))
            continue
        if value is None:
            continue
        tlv = _tlv(meta["tag"], _encode_value(meta, value))
        if meta["tag"] == Tag.HMAC_TAG and isinstance(obj, tuple(MESSAGE_TYPES.values())):
            trailer = tlv
        else:
            out += tlv
    return bytes(out) + trailer


def encode(msg: Message) -> bytes:
    """Serialize a message. Presence of required fields is not enforced here."""
    return MAGIC + bytes([msg.MSG_TYPE]) + _encode_fields(msg)


def _decode_fields(cls, buf: bytes, *, top_level: bool):
    by_tag = {meta["tag"]: (name, meta) for name, meta in _schema(cls)}
    values: dict = {}
    entries: list = []
    last_tag = -1
    pos = 0
    saw_mac = False
    while pos < len(buf):
        if saw_mac:
            raise MalformedFrame("hmac_tag must be the last field")
        if len(buf) - pos < TLV_HEADER.size:
            raise MalformedFrame("truncated field header")
        tag, length = TLV_HEADER.unpack_from(buf, pos)
        pos += TLV_HEADER.size
        if length > len(buf) - pos:
            raise MalformedFrame(f"field 0x{tag:04x} overruns the frame")
        raw = buf[pos:pos + length]
        pos += length
        if tag not in by_tag:
            raise MalformedFrame(f"tag 0x{tag:04x} not allowed in {cls.__name__}")
        name, meta = by_tag[tag]
        is_mac = top_level and tag == Tag.HMAC_TAG
        if is_mac:
            saw_mac = True
        elif meta["kind"] == ENTRIES and tag == last_tag:
            pass
        elif tag <= last_tag:
            raise MalformedFrame(f"tag 0x{tag:04x} out of order or duplicated")
        if meta["kind"] == ENTRIES:
            entries.append(_decode_fields(KeyEntry, raw, top_level=False))
            values[name] = entries
        else:
            values[name] = _decode_value(meta, raw)
        if not is_mac:
            last_tag = tag
    for name, meta in _schema(cls):
        if meta["required"] and name not in values:
            raise MalformedFrame(f"{cls.__name__} is missing required field {name}")
    if entries:
        values = {**values, "key_entries": tuple(entries)}
    return cls(**values)


def decode(frame: bytes) -> Message:
    frame = bytes(frame)
    if len(frame) < HEADER_SIZE:
        raise MalformedFrame("frame shorter than its header")
    if frame[:len(MAGIC)] != MAGIC:
        raise MalformedFrame("bad frame magic")
    try:
        msg_type = MsgType(frame[len(MAGIC)])
    except ValueError:
        raise UnknownMsgType(f"unknown message type {frame[len(MAGIC)]}") from None
    return _decode_fields(MESSAGE_TYPES[msg_type], frame[HEADER_SIZE:], top_level=True)


def peek_type(frame: bytes) -> MsgType:
    if len(frame) < HEADER_SIZE or frame[:len(MAGIC)] != MAGIC:
        raise MalformedFrame("bad frame header")
    try:
        return MsgType(frame[len(MAGIC)])
    except ValueError:
        raise UnknownMsgType(f"unknown message type {frame[len(MAGIC)]}") from None


# --- authentication helpers --------------------------------------------------

def mac_input(msg: Message) -> bytes:
    """Bytes an HMAC tag on ``msg`` covers: the frame up to the tag value."""
    return encode(replace(msg, hmac_tag=None)) + TLV_HEADER.pack(Tag.HMAC_TAG, MAC_SIZE)


def with_mac(msg: Message, tag: bytes) -> bytes:
    return mac_input(msg) + tag


def split_mac(frame: bytes) -> tuple[bytes, bytes]:
    """(covered bytes, tag) of an authenticated frame, without parsing it."""
    if len(frame) < HEADER_SIZE + TLV_HEADER.size + MAC_SIZE:
        raise MalformedFrame("frame too short to carry an hmac tag")
    return bytes(frame[:-MAC_SIZE]), bytes(frame[-MAC_SIZE:])


def signing_input(req: LicenseRequest) -> bytes:
    """Bytes covered by the RSA signature of a license request."""
    return encode(replace(req, rsa_signature=None))


def error_frame(kind: str, detail: str = "") -> bytes:
    return encode(ErrorMessage(kind=kind, detail=detail))


# --- stream framing -----------------------------------------------------------

_LEN = struct.Struct(">I")


def frame_for_stream(frame: bytes) -> bytes:
    return _LEN.pack(len(frame)) + frame


def _recv_exact(sock, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(n - len(chunks))
        if not chunk:
            raise EOFError("connection closed mid-frame")
        chunks += chunk
    return bytes(chunks)


def read_stream_frame(sock) -> bytes | None:
    """Next length-prefixed frame, or None on a clean close between frames."""
    head = sock.recv(_LEN.size)
    if not head:
        return None
    if len(head) < _LEN.size:
        head += _recv_exact(sock, _LEN.size - len(head))
    (length,) = _LEN.unpack(head)
    if length > MAX_FRAME:
        raise MalformedFrame(f"frame of {length} bytes exceeds the limit")
    return _recv_exact(sock, length)


def write_stream_frame(sock, frame: bytes) -> None:
    sock.sendall(frame_for_stream(frame))
