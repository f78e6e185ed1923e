"""Key derivation: one parent AES key in, asset + client MAC + server MAC keys out.

Each derived chunk is AES-128-CMAC(parent, counter || label || device_blob),
where the counter is a single ASCII digit. The asset key uses counter '1'
with label ``ENCRYPTION``; the two MAC keys use counters '1'..'4' with label
``AUTHENTICATION``, chunks 1-2 forming the client key and 3-4 the server key.
"""

from __future__ import annotations

from dataclasses import dataclass

from .crypto import aes_cmac
from .errors import EmptyBlob, KeyLengthError

ENCRYPTION_LABEL = b"ENCRYPTION"
AUTHENTICATION_LABEL = b"AUTHENTICATION"


@dataclass(frozen=True)
class DerivedKeySet:
    asset_key: bytes
    mac_client_key: bytes
    mac_server_key: bytes

    def __post_init__(self):
        if (len(self.asset_key), len(self.mac_client_key), len(self.mac_server_key)) != (16, 32, 32):
            raise KeyLengthError("derived key set must be 16 + 32 + 32 bytes")

    def __repr__(self) -> str:
        return "DerivedKeySet(<redacted>)"

    def with_server_key(self, mac_server_key: bytes) -> "DerivedKeySet":
        return DerivedKeySet(self.asset_key, self.mac_client_key, mac_server_key)


@dataclass(frozen=True)
class DerivationContext:
    encryption_context: bytes
    mac_context_base: bytes  # label + blob, counter not included

    def mac_context(self, counter: int) -> bytes:
        if not 1 <= counter <= 4:
            raise ValueError("mac context counter must be 1..4")
        return str(counter).encode("ascii") + self.mac_context_base


def build_contexts(device_blob: bytes) -> DerivationContext:
    if not device_blob:
        raise EmptyBlob("device blob must not be empty")
    return DerivationContext(
        encryption_context=b"1" + ENCRYPTION_LABEL + device_blob,
        mac_context_base=AUTHENTICATION_LABEL + device_blob,
    )


def derive_keys(parent_key: bytes, ctx: DerivationContext) -> DerivedKeySet:
    if len(parent_key) != 16:
        raise KeyLengthError(f"parent key must be 16 bytes, got {len(parent_key)}")
    mac = [aes_cmac(parent_key, ctx.mac_context(c)) for c in (1, 2, 3, 4)]
    return DerivedKeySet(
        asset_key=aes_cmac(parent_key, ctx.encryption_context),
        mac_client_key=mac[0] + mac[1],
        mac_server_key=mac[2] + mac[3],
    )
