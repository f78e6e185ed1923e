"""The 128-byte keybox anchoring the key ladder.

Layout (big-endian CRC)::

    0    device_id            32
    32   device_key           16
    48   provisioning_token   72
    120  magic "kbox"          4
    124  crc32 of bytes 0..123 4
"""

from __future__ import annotations

import enum
import os
import zlib
from dataclasses import dataclass

from . import crypto
from .errors import BadPadding, EntropyError, IntegrityError, LengthError

KEYBOX_SIZE = 128
KEYBOX_MAGIC = b"kbox"
WRAPPED_KEYBOX_SIZE = 16 + 144

_DEVICE_ID = slice(0, 32)
_DEVICE_KEY = slice(32, 48)
_TOKEN = slice(48, 120)
_MAGIC = slice(120, 124)
_CRC = slice(124, 128)


class KeyboxStatus(enum.Enum):
    OK = "OK"
    BAD_MAGIC = "BadMagic"
    BAD_CRC = "BadCrc"


def crc32(data: bytes) -> int:
    """Reflected CRC-32 (poly 0xEDB88320, init and xorout 0xFFFFFFFF)."""
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class Keybox:
    device_id: bytes
    device_key: bytes
    provisioning_token: bytes
    magic: bytes = KEYBOX_MAGIC
    crc: bytes = b"\x00" * 4

    def __post_init__(self):
        for name, size in (("device_id", 32), ("device_key", 16), ("provisioning_token", 72),
                           ("magic", 4), ("crc", 4)):
            value = getattr(self, name)
            if len(value) != size:
                raise LengthError(f"{name} must be {size} bytes, got {len(value)}")

    @classmethod
    def build(cls, device_id: bytes, device_key: bytes, provisioning_token: bytes) -> "Keybox":
        """Assemble a keybox with the magic and a correct CRC filled in."""
        body = device_id + device_key + provisioning_token + KEYBOX_MAGIC
        return cls(device_id, device_key, provisioning_token, KEYBOX_MAGIC,
                   crc32(body).to_bytes(4, "big"))

    def serialize(self) -> bytes:
        return self.device_id + self.device_key + self.provisioning_token + self.magic + self.crc

    def __bytes__(self) -> bytes:
        return self.serialize()

    def __repr__(self) -> str:
        # never print the device key
        return f"Keybox(device_id={self.device_id.hex()}, magic={self.magic!r})"

    @property
    def provisioning_blob(self) -> bytes:
        """Device blob mixed into the provisioning-phase derivation."""
        return self.provisioning_token + self.device_id


def parse_keybox(raw: bytes) -> Keybox:
    """Slice a raw keybox into fields. Magic and CRC are not checked here."""
    if len(raw) != KEYBOX_SIZE:
        raise LengthError(f"keybox must be {KEYBOX_SIZE} bytes, got {len(raw)}")
    raw = bytes(raw)
    return Keybox(raw[_DEVICE_ID], raw[_DEVICE_KEY], raw[_TOKEN], raw[_MAGIC], raw[_CRC])


def validate_keybox(kb: Keybox) -> KeyboxStatus:
    if kb.magic != KEYBOX_MAGIC:
        return KeyboxStatus.BAD_MAGIC
    raw = kb.serialize()
    if crc32(raw[:124]).to_bytes(4, "big") != kb.crc:
        return KeyboxStatus.BAD_CRC
    return KeyboxStatus.OK


def generate_keybox(randbytes: crypto.RandomSource = os.urandom) -> Keybox:
    """Fresh synthetic keybox; ``randbytes(n)`` must return n bytes."""
    try:
        material = randbytes(32 + 16 + 72)
    except Exception as exc:
        raise EntropyError(f"entropy source failed: {exc}") from exc
    if not isinstance(material, (bytes, bytearray)) or len(material) != 120:
        raise EntropyError("entropy source returned a short or invalid buffer")
    material = bytes(material)
    return Keybox.build(material[_DEVICE_ID], material[_DEVICE_KEY], material[_TOKEN])


def wrap_keybox(kb: Keybox, transport_key: bytes,
                randbytes: crypto.RandomSource = os.urandom) -> bytes:
    """IV || AES-128-CBC(transport_key, keybox)."""
    if validate_keybox(kb) is not KeyboxStatus.OK:
        raise IntegrityError("refusing to wrap an invalid keybox")
    iv = randbytes(16)
    return iv + crypto.aes_cbc_encrypt(transport_key, iv, kb.serialize())


def install_keybox(wrapped: bytes, transport_key: bytes) -> Keybox:
    if len(wrapped) != WRAPPED_KEYBOX_SIZE:
        raise IntegrityError(f"wrapped keybox must be {WRAPPED_KEYBOX_SIZE} bytes")
    try:
        raw = crypto.aes_cbc_decrypt(transport_key, wrapped[:16], wrapped[16:])
    except BadPadding as exc:
        raise IntegrityError("wrapped keybox does not decrypt") from exc
    if len(raw) != KEYBOX_SIZE:
        raise IntegrityError("unwrapped keybox has the wrong length")
    kb = parse_keybox(raw)
    status = validate_keybox(kb)
    if status is not KeyboxStatus.OK:
        raise IntegrityError(f"unwrapped keybox failed validation: {status.value}")
    return kb


def storage_key_for(kb: Keybox) -> bytes:
    """Device-unique AES key used to rewrap the device RSA credential at rest."""
    return crypto.aes_cmac(kb.device_key, b"\x01STORAGE" + kb.device_id)


def load_keybox_file(path) -> Keybox:
    with open(path, "rb") as fh:
        return parse_keybox(fh.read())


def save_keybox_file(kb: Keybox, path) -> None:
    with open(path, "wb") as fh:
        fh.write(kb.serialize())
