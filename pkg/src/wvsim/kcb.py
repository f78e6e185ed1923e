"""Key control block: 16 bytes of per-key metadata, magic || nonce || ttl || bits."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

from .errors import BadKcbMagic, LengthError

KCB_SIZE = 16
KCB_MAGIC = b"kctl"


class ControlBits(enum.IntFlag):
    NONE = 0
    ALLOW_CONTENT_DECRYPT = 1 << 0
    ALLOW_GENERIC_ENCRYPT = 1 << 1
    ALLOW_GENERIC_DECRYPT = 1 << 2
    ALLOW_GENERIC_SIGN = 1 << 3
    ALLOW_GENERIC_VERIFY = 1 << 4
    NONCE_REQUIRED = 1 << 5
    ANTI_ROLLBACK_REQUIRED = 1 << 6


USAGE_BITS = (
    ControlBits.ALLOW_CONTENT_DECRYPT,
    ControlBits.ALLOW_GENERIC_ENCRYPT,
    ControlBits.ALLOW_GENERIC_DECRYPT,
    ControlBits.ALLOW_GENERIC_SIGN,
    ControlBits.ALLOW_GENERIC_VERIFY,
)
GENERIC_RIGHTS = (ControlBits.ALLOW_GENERIC_ENCRYPT | ControlBits.ALLOW_GENERIC_DECRYPT
                  | ControlBits.ALLOW_GENERIC_SIGN | ControlBits.ALLOW_GENERIC_VERIFY)


def parse_control_bits(value) -> ControlBits:
    """Accept an int, a flag name, or a list of names (``"allow_generic_sign"``)."""
    if isinstance(value, int):
        return ControlBits(value)
    if isinstance(value, str):
        value = [value]
    bits = ControlBits.NONE
    for name in value:
        try:
            bits |= ControlBits[name.upper()]
        except KeyError:
            raise ValueError(f"unknown control bit {name!r}") from None
    return bits


@dataclass(frozen=True)
class KeyControlBlock:
    nonce: int
    ttl: int
    control_bits: int
    magic: bytes = KCB_MAGIC

    _FMT = struct.Struct(">4sIII")

    def serialize(self) -> bytes:
        return self._FMT.pack(self.magic, self.nonce, self.ttl, int(self.control_bits))

    @classmethod
    def parse(cls, raw: bytes) -> "KeyControlBlock":
        if len(raw) != KCB_SIZE:
            raise LengthError(f"key control block must be {KCB_SIZE} bytes, got {len(raw)}")
        magic, nonce, ttl, bits = cls._FMT.unpack(raw)
        return cls(nonce=nonce, ttl=ttl, control_bits=bits, magic=magic)

    def verify_magic(self) -> None:
        # version-tagged "kcXX" variants have no defined semantics here
        if self.magic != KCB_MAGIC:
            raise BadKcbMagic(f"unexpected key control magic {self.magic!r}")

    @property
    def bits(self) -> ControlBits:
        return ControlBits(self.control_bits & 0x7F)

    def allows(self, right: ControlBits) -> bool:
        return bool(self.control_bits & right)

    def with_ttl(self, ttl: int) -> "KeyControlBlock":
        return replace(self, ttl=ttl)
