"""Independent oracles and a small in-process protocol world for the tests.

The oracles deliberately avoid the package's own primitives: CMAC is built
from raw AES-ECB by hand, CRC-32 is bitwise, HMAC is ipad/opad over hashlib,
and CTR is an ECB keystream with an explicit 128-bit counter.
"""

from __future__ import annotations

import hashlib
import os
import itertools
from dataclasses import dataclass, replace

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from wvsim import crypto, wire
from wvsim.cdm import Cdm
from wvsim.clock import ScriptedClock
from wvsim.host import CdmClient
from wvsim.kcb import ControlBits, KeyControlBlock
from wvsim.keybox import Keybox, generate_keybox, storage_key_for
from wvsim.ladder import build_contexts, derive_keys
from wvsim.servers import Backend, ContentKeySpec, Keystore
from wvsim.trace import Tracer
from wvsim.transport import InProcessTransport

# --- oracles ------------------------------------------------------------------


def aes_block(key: bytes, block: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def _dbl(block: bytes) -> bytes:
    n = int.from_bytes(block, "big") << 1
    if n >> 128:
        n = (n & ((1 << 128) - 1)) ^ 0x87
    return n.to_bytes(16, "big")


def cmac_oracle(key: bytes, msg: bytes) -> bytes:
    k1 = _dbl(aes_block(key, bytes(16)))
    k2 = _dbl(k1)
    blocks = [msg[i:i + 16] for i in range(0, len(msg), 16)] or [b""]
    last = blocks[-1]
    if len(last) == 16:
        last = _xor(last, k1)
    else:
        last = _xor(last + b"\x80" + bytes(15 - len(last)), k2)
    x = bytes(16)
    for block in blocks[:-1] + [last]:
        x = aes_block(key, _xor(x, block))
    return x


def crc32_oracle(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def hmac_oracle(key: bytes, msg: bytes) -> bytes:
    if len(key) > 64:
        key = hashlib.sha256(key).digest()
    key = key.ljust(64, b"\x00")
    inner = hashlib.sha256(bytes(b ^ 0x36 for b in key) + msg).digest()
    return hashlib.sha256(bytes(b ^ 0x5C for b in key) + inner).digest()


def ctr_oracle(key: bytes, iv: bytes, data: bytes) -> bytes:
    counter = int.from_bytes(iv, "big")
    out = bytearray()
    for i in range(0, len(data), 16):
        ks = aes_block(key, counter.to_bytes(16, "big"))
        out += _xor(data[i:i + 16], ks)
        counter = (counter + 1) % (1 << 128)
    return bytes(out)


def derive_oracle(parent: bytes, blob: bytes) -> tuple[bytes, bytes, bytes]:
    """Asset key, client MAC key, server MAC key built from the oracle CMAC."""
    asset = cmac_oracle(parent, b"1ENCRYPTION" + blob)
    mac = b"".join(cmac_oracle(parent, b"%dAUTHENTICATION" % c + blob) for c in (1, 2, 3, 4))
    return asset, mac[:32], mac[32:]


def cenc_oracle(key: bytes, iv: bytes, subsamples) -> bytes:
    """Pull the protected ranges out, run one CTR stream over them, put them back."""
    protected = b"".join(bytes(d[c:c + p]) for c, p, d in subsamples)
    stream = ctr_oracle(key, iv, protected)
    out, pos = bytearray(), 0
    for c, p, d in subsamples:
        out += bytes(d[:c]) + stream[pos:pos + p]
        pos += p
    return bytes(out)


# --- protocol world -----------------------------------------------------------

MEDIA_BITS = int(ControlBits.ALLOW_CONTENT_DECRYPT | ControlBits.NONCE_REQUIRED)
GENERIC_BITS = int(ControlBits.ALLOW_GENERIC_ENCRYPT | ControlBits.ALLOW_GENERIC_DECRYPT
                   | ControlBits.ALLOW_GENERIC_SIGN | ControlBits.ALLOW_GENERIC_VERIFY
                   | ControlBits.NONCE_REQUIRED)

_RSA_CACHE: dict[int, object] = {}


def cached_rsa_key(index: int = 0):
    if index not in _RSA_CACHE:
        _RSA_CACHE[index] = crypto.generate_rsa_key()
    return _RSA_CACHE[index]


@dataclass
class World:
    kb: Keybox
    keystore: Keystore
    backend: Backend
    cdm: Cdm
    client: CdmClient
    clock: ScriptedClock
    specs: list[ContentKeySpec]

    @property
    def key_ids(self) -> list[bytes]:
        return [s.key_id for s in self.specs]

    def licensed_session(self, key_ids=None) -> int:
        sid = self.cdm.open_session()
        self.client.load_device_key(sid)
        self.client.acquire_license(sid, self.key_ids if key_ids is None else key_ids)
        return sid


def make_world(seed: int = 1, specs=None, *, rotate: bool = False, rsa_index: int = 0,
               credential_path=None, kb: Keybox | None = None) -> World:
    ctr = itertools.count()

    def stream():
        return crypto.seeded_random(seed * 64 + next(ctr))

    kb = kb or generate_keybox(stream())
    if specs is None:
        rng = stream()
        specs = [ContentKeySpec(rng(16), rng(16), MEDIA_BITS),
                 ContentKeySpec(rng(16), rng(16), GENERIC_BITS)]
    ks = Keystore()
    ks.register_keybox(kb)
    for spec in specs:
        ks.add_content_key(spec)
    # pre-seed the device RSA key so tests do not pay for keygen each time
    key = cached_rsa_key(rsa_index)
    ks.device_keys[kb.device_id] = key
    ks.device_certs[kb.device_id] = key.public_key()
    backend = Backend(ks, randbytes=stream(), rotate_server_mac_key=rotate)
    clock = ScriptedClock(1000.0)
    cdm = Cdm(kb, clock=clock, randbytes=stream(), tracer=Tracer())
    client = CdmClient(cdm, InProcessTransport(backend), kb, storage_key=storage_key_for(kb),
                       credential_path=credential_path, randbytes=stream())
    return World(kb, ks, backend, cdm, client, clock, list(specs))


def flip_bit(data: bytes, bit: int) -> bytes:
    out = bytearray(data)
    out[bit // 8] ^= 1 << (7 - bit % 8)
    return bytes(out)


def key_state(cdm: Cdm, sid: int):
    """Snapshot of everything a response could change in a session."""
    sess = cdm._sessions[sid]
    return (
        dict(sess.key_table),
        sess.derived,
        sess.selected_key,
        sess.rsa_key is not None,
        tuple(cdm.nonces.live()),
    )


# --- hand-built license responses ------------------------------------------------

@dataclass
class Crafted:
    frame: bytes
    derived: object
    keys: dict


def craft_license(world: World, sid: int, entries, *, nonce: int | None = None,
                  blob: bytes = b"test-device-blob", encrypt_kcb: bool = True) -> Crafted:
    """Derive a session key into ``sid`` and build a signed LicenseResponse.

    ``entries`` is a list of (key_id, key, KeyControlBlock). The session must
    already hold the device RSA key.
    """
    cdm = world.cdm
    session_key = os.urandom(16)
    pub = world.keystore.device_certs[world.kb.device_id]
    enc = crypto.rsa_oaep_encrypt(pub, session_key)
    cdm.derive_keys_from_session_key(sid, enc, blob)
    derived = derive_keys(session_key, build_contexts(blob))
    wire_entries = []
    for kid, key, kcb in entries:
        iv = os.urandom(16)
        raw = kcb.serialize() if isinstance(kcb, KeyControlBlock) else kcb
        wire_entries.append(wire.KeyEntry(
            key_id=kid, iv=iv,
            enc_key=crypto.aes_cbc_encrypt(derived.asset_key, iv, key),
            kcb_blob=crypto.aes_cbc_encrypt(key, iv, raw) if encrypt_kcb else raw,
            kcb_encrypted=encrypt_kcb,
        ))
    msg = wire.LicenseResponse(nonce=nonce or 0, request_id=b"req", enc_session_key=enc,
                               key_entries=tuple(wire_entries))
    tag = crypto.hmac_sha256(derived.mac_server_key, wire.mac_input(msg))
    return Crafted(wire.encode(replace(msg, hmac_tag=tag)), derived,
                   {kid: key for kid, key, _ in entries})


def craft_refresh(derived, nonce: int, entries) -> bytes:
    """Signed RefreshResponse; ``entries`` is a list of (key_id, key, KeyControlBlock)."""
    wire_entries = []
    for kid, key, kcb in entries:
        iv = os.urandom(16)
        wire_entries.append(wire.KeyEntry(key_id=kid, iv=iv,
                                          kcb_blob=crypto.aes_cbc_encrypt(key, iv, kcb.serialize()),
                                          kcb_encrypted=True))
    msg = wire.RefreshResponse(nonce=nonce, key_entries=tuple(wire_entries))
    return wire.with_mac(msg, crypto.hmac_sha256(derived.mac_server_key, wire.mac_input(msg)))


def rsa_session(world: World) -> int:
    sid = world.cdm.open_session()
    world.client.load_device_key(sid)
    return sid
