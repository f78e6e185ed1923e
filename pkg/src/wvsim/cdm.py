"""Client-side content decryption module.

Holds the keybox, the session table and the nonce table, and implements
every step of the client key ladder: provisioning-phase derivation, device
RSA key rewrap/load, session-key derivation, key loading behind key control
blocks, CENC decryption and the generic crypto API.

Every public operation is serialized behind one re-entrant lock and leaves
exactly one trace line named by its oecc symbol, whether it succeeds or not.
"""

from __future__ import annotations

import enum
import functools
import inspect
import itertools
import logging
import os
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from . import cenc, crypto, wire
from .clock import MonotonicClock
from .errors import (
    BadPadding,
    BadServerMac,
    BadStorageMac,
    IntegrityError,
    KeyExpired,
    LengthError,
    MalformedFrame,
    MalformedKey,
    NoDerivedKeys,
    NoKeybox,
    NoKeySelected,
    NoRsaKey,
    OaepError,
    StaleNonce,
    TooManySessions,
    UnknownKeyId,
    UnknownSession,
    Unsupported,
    UsageDenied,
    WvSimError,
)
from .kcb import ControlBits, KeyControlBlock
from .keybox import Keybox, KeyboxStatus, install_keybox, validate_keybox, wrap_keybox
from .ladder import DerivedKeySet, build_contexts, derive_keys
from .nonces import NonceTable
from .trace import Tracer

log = logging.getLogger(__name__)

DEFAULT_MAX_SESSIONS = 16
API_VERSION = b"wvsim-oemcrypto-16"
SECURITY_LEVEL = b"L_SIM"
CREDENTIAL_OVERHEAD = 16 + 32


class DeviceInfoKind(enum.Enum):
    DEVICE_ID = "DeviceID"
    KEY_DATA = "KeyData"
    RANDOM = "Random"
    API_VERSION = "ApiVersion"
    SECURITY_LEVEL = "SecurityLevel"


class GenericOp(enum.Enum):
    ENCRYPT = "Encrypt"
    DECRYPT = "Decrypt"
    SIGN = "Sign"
    VERIFY = "Verify"


@dataclass(frozen=True)
class DeviceRsaCredential:
    """Device RSA key at rest: IV || AES-128-CBC(PKCS#8) || HMAC-SHA256 tag."""

    iv: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.iv + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DeviceRsaCredential":
        body = len(raw) - CREDENTIAL_OVERHEAD
        if body < 16 or body % 16:
            raise MalformedKey(f"wrapped credential of {len(raw)} bytes is truncated")
        return cls(raw[:16], raw[16:-32], raw[-32:])


@dataclass
class ContentKeyEntry:
    key_id: bytes
    key: bytes
    kcb: KeyControlBlock
    loaded_at: float

    def __repr__(self) -> str:
        return f"ContentKeyEntry(key_id={self.key_id.hex()}, kcb={self.kcb})"

    def expired(self, now: float) -> bool:
        return self.kcb.ttl != 0 and now > self.loaded_at + self.kcb.ttl


@dataclass
class SessionState:
    session_id: int
    derived: DerivedKeySet | None = None
    derived_from_session_key: bool = False
    key_table: dict[bytes, ContentKeyEntry] = field(default_factory=dict)
    selected_key: bytes | None = None
    device_blob: bytes = b""
    rsa_key: object | None = None

    def wipe(self) -> None:
        self.derived = None
        self.key_table.clear()
        self.selected_key = None
        self.rsa_key = None


def _traced(num: int, inp: str | Callable | None = None, out: Callable | None = None):
    """Wrap a CDM method: take the lock, run it, emit one trace record."""

    def deco(fn):
        sig = inspect.signature(fn)

        @functools.wraps(fn)
        def wrapper(self, *args, **kwargs):
            bound = sig.bind(self, *args, **kwargs)
            bound.apply_defaults()
            arguments = bound.arguments
            session = arguments.get("session_id")
            if callable(inp):
                payload = inp(arguments)
            elif inp:
                payload = arguments.get(inp)
            else:
                payload = None
            with self._lock:
                try:
                    result = fn(self, *args, **kwargs)
                except Exception as exc:
                    kind = exc.kind if isinstance(exc, WvSimError) else type(exc).__name__
                    self.tracer.emit(num, session, f"Error:{kind}", payload, None)
                    raise
                if num == 9:
                    session = result
                self.tracer.emit(num, session, "OK", payload,
                                 out(result) if out else result)
                return result

        return wrapper

    return deco


def _subsample_bytes(args) -> bytes:
    return b"".join(bytes(s[2]) for s in args["subsamples"])


class Cdm:
    def __init__(
        self,
        keybox: Keybox | None = None,
        *,
        clock=None,
        randbytes: crypto.RandomSource = os.urandom,
        tracer: Tracer | None = None,
        max_sessions: int = DEFAULT_MAX_SESSIONS,
    ):
        if keybox is not None and validate_keybox(keybox) is not KeyboxStatus.OK:
            raise IntegrityError("keybox failed validation")
        self._keybox = keybox
        self.clock = clock or MonotonicClock()
        self._randbytes = randbytes
        self.tracer = tracer or Tracer()
        self.max_sessions = max_sessions
        self.nonces = NonceTable(randbytes, self.clock)
        self._sessions: dict[int, SessionState] = {}
        self._ids = itertools.count(1)
        self._lock = threading.RLock()

    # -- internal helpers -------------------------------------------------

    def _session(self, session_id: int) -> SessionState:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise UnknownSession(f"no open session {session_id}") from None

    def _require_keybox(self) -> Keybox:
        if self._keybox is None:
            raise NoKeybox("no keybox installed")
        return self._keybox

    def _verify_server_mac(self, derived: DerivedKeySet, frame: bytes) -> None:
        covered, tag = wire.split_mac(frame)
        if not crypto.tags_equal(crypto.hmac_sha256(derived.mac_server_key, covered), tag):
            raise BadServerMac("response tag does not verify under the server MAC key")

    def _license_keys(self, sess: SessionState) -> DerivedKeySet:
        if sess.derived is None or not sess.derived_from_session_key:
            raise NoDerivedKeys("no keys derived from a session key")
        return sess.derived

    def _usable_key(self, sess: SessionState, right: ControlBits) -> ContentKeyEntry:
        if sess.selected_key is None:
            raise NoKeySelected("select a key first")
        entry = sess.key_table[sess.selected_key]
        if entry.expired(self.clock.now()):
            raise KeyExpired(f"key {entry.key_id.hex()} has expired")
        if not entry.kcb.allows(right):
            raise UsageDenied(f"key {entry.key_id.hex()} lacks {right.name}")
        return entry

    @staticmethod
    def _parse_kcb(raw: bytes) -> KeyControlBlock:
        try:
            kcb = KeyControlBlock.parse(raw)
        except LengthError as exc:
            raise MalformedFrame(str(exc)) from None
        kcb.verify_magic()
        return kcb

    # -- keybox and device info ------------------------------------------

    @_traced(3, inp="wrapped")
    def install_keybox(self, wrapped: bytes, transport_key: bytes) -> None:
        self._keybox = install_keybox(wrapped, transport_key)

    @_traced(8)
    def wrap_keybox(self, transport_key: bytes) -> bytes:
        return wrap_keybox(self._require_keybox(), transport_key, self._randbytes)

    @_traced(5, out=lambda status: status.value)
    def is_keybox_valid(self) -> KeyboxStatus:
        return validate_keybox(self._require_keybox())

    @_traced(7)
    def get_device_id(self) -> bytes:
        return self._require_keybox().device_id

    @_traced(4)
    def get_key_data(self) -> bytes:
        return self._require_keybox().provisioning_token

    @_traced(6, inp="n")
    def get_random(self, n: int) -> bytes:
        if n < 0:
            raise ValueError("cannot generate a negative number of bytes")
        return self._randbytes(n) if n else b""

    @_traced(22)
    def api_version(self) -> bytes:
        return API_VERSION

    @_traced(23)
    def security_level(self) -> bytes:
        return SECURITY_LEVEL

    def query_device_info(self, kind: DeviceInfoKind, n: int = 0) -> bytes:
        kind = DeviceInfoKind(kind)
        if kind is DeviceInfoKind.DEVICE_ID:
            return self.get_device_id()
        if kind is DeviceInfoKind.KEY_DATA:
            return self.get_key_data()
        if kind is DeviceInfoKind.RANDOM:
            return self.get_random(n)
        if kind is DeviceInfoKind.API_VERSION:
            return self.api_version()
        return self.security_level()

    # -- sessions and nonces ---------------------------------------------

    @_traced(9)
    def open_session(self) -> int:
        if len(self._sessions) >= self.max_sessions:
            raise TooManySessions(f"at most {self.max_sessions} open sessions")
        sid = next(self._ids)
        self._sessions[sid] = SessionState(sid)
        return sid

    @_traced(10)
    def close_session(self, session_id: int) -> None:
        self._session(session_id).wipe()
        del self._sessions[session_id]

    @_traced(37)
    def get_max_number_of_sessions(self) -> int:
        return self.max_sessions

    @_traced(38)
    def get_number_of_open_sessions(self) -> int:
        return len(self._sessions)

    @_traced(14)
    def generate_nonce(self, session_id: int) -> int:
        self._session(session_id)
        return self.nonces.generate()

    # -- provisioning phase ------------------------------------------------

    @_traced(12, inp=lambda a: a["keybox"].provisioning_blob if a["keybox"] else None)
    def generate_derived_keys(self, session_id: int, keybox: Keybox | None = None) -> None:
        sess = self._session(session_id)
        kb = keybox or self._require_keybox()
        blob = kb.provisioning_blob
        sess.derived = derive_keys(kb.device_key, build_contexts(blob))
        sess.derived_from_session_key = False
        sess.device_blob = blob

    @_traced(13, inp="message")
    def generate_signature(self, session_id: int, message: bytes) -> bytes:
        sess = self._session(session_id)
        if sess.derived is None:
            raise NoDerivedKeys("generate derived keys first")
        return crypto.hmac_sha256(sess.derived.mac_client_key, message)

    @_traced(18, inp="response", out=lambda cred: cred.to_bytes())
    def rewrap_device_rsa_key(self, session_id: int, response: bytes,
                              storage_key: bytes) -> DeviceRsaCredential:
        sess = self._session(session_id)
        if sess.derived is None or sess.derived_from_session_key:
            raise NoDerivedKeys("provisioning keys have not been derived")
        derived = sess.derived
        self._verify_server_mac(derived, response)
        msg = wire.decode(response)
        if not isinstance(msg, wire.ProvisioningResponse):
            raise MalformedFrame(f"expected a provisioning response, got {type(msg).__name__}")
        if msg.nonce not in self.nonces:
            raise StaleNonce(f"nonce {msg.nonce:08x} is not live")
        pkcs8 = crypto.aes_cbc_decrypt(derived.asset_key, msg.iv, msg.ciphertext)
        crypto.rsa_from_pkcs8(pkcs8)
        self.nonces.consume(msg.nonce)
        iv = self._randbytes(16)
        ct = crypto.aes_cbc_encrypt(storage_key, iv, pkcs8)
        return DeviceRsaCredential(iv, ct, crypto.hmac_sha256(storage_key, iv + ct))

    @_traced(19, inp=lambda a: a["wrapped"].to_bytes()
             if isinstance(a["wrapped"], DeviceRsaCredential) else a["wrapped"])
    def load_device_rsa_key(self, session_id: int, wrapped, storage_key: bytes) -> None:
        sess = self._session(session_id)
        if not isinstance(wrapped, DeviceRsaCredential):
            wrapped = DeviceRsaCredential.from_bytes(bytes(wrapped))
        expected = crypto.hmac_sha256(storage_key, wrapped.iv + wrapped.ciphertext)
        if not crypto.tags_equal(expected, wrapped.tag):
            raise BadStorageMac("credential tag does not verify under the storage key")
        try:
            pkcs8 = crypto.aes_cbc_decrypt(storage_key, wrapped.iv, wrapped.ciphertext)
        except BadPadding as exc:
            raise MalformedKey("credential does not decrypt") from exc
        sess.rsa_key = crypto.rsa_from_pkcs8(pkcs8)

    # -- license phase -----------------------------------------------------

    @_traced(20, inp="message")
    def generate_rsa_signature(self, session_id: int, message: bytes,
                               scheme: int = crypto.SCHEME_PSS) -> bytes:
        sess = self._session(session_id)
        if sess.rsa_key is None:
            raise NoRsaKey("load the device RSA key first")
        return crypto.rsa_sign(sess.rsa_key, message, scheme, self._randbytes)

    @_traced(21, inp="enc_session_key")
    def derive_keys_from_session_key(self, session_id: int, enc_session_key: bytes,
                                     device_blob: bytes) -> None:
        sess = self._session(session_id)
        if sess.rsa_key is None:
            raise NoRsaKey("load the device RSA key first")
        session_key = crypto.rsa_oaep_decrypt(sess.rsa_key, enc_session_key)
        if len(session_key) != 16:
            raise OaepError("session key must be 16 bytes")
        sess.derived = derive_keys(session_key, build_contexts(device_blob))
        sess.derived_from_session_key = True
        sess.device_blob = device_blob

    @_traced(15, inp="response")
    def load_keys(self, session_id: int, response: bytes) -> int:
        """Verify a license response and load its keys, all or nothing."""
        sess = self._session(session_id)
        derived = self._license_keys(sess)
        self._verify_server_mac(derived, response)
        msg = wire.decode(response)
        if not isinstance(msg, wire.LicenseResponse):
            raise MalformedFrame(f"expected a license response, got {type(msg).__name__}")

        now = self.clock.now()
        staged: dict[bytes, ContentKeyEntry] = {}
        nonces_used: set[int] = set()
        for entry in msg.key_entries:
            if entry.iv is None or entry.enc_key is None:
                raise MalformedFrame("license key entry lacks iv or encrypted key")
            key = crypto.aes_cbc_decrypt(derived.asset_key, entry.iv, entry.enc_key)
            if len(key) != 16:
                raise MalformedKey("content key must be 16 bytes")
            raw = (crypto.aes_cbc_decrypt(key, entry.iv, entry.kcb_blob)
                   if entry.kcb_encrypted else entry.kcb_blob)
            kcb = self._parse_kcb(raw)
            if kcb.allows(ControlBits.NONCE_REQUIRED):
                if kcb.nonce not in self.nonces:
                    raise StaleNonce(f"nonce {kcb.nonce:08x} is not live")
                nonces_used.add(kcb.nonce)
            staged[entry.key_id] = ContentKeyEntry(entry.key_id, key, kcb, now)

        new_server_key = None
        if msg.new_server_mac_key_ct is not None:
            if msg.iv is None:
                raise MalformedFrame("rotated server key without an iv")
            new_server_key = crypto.aes_cbc_decrypt(derived.asset_key, msg.iv,
                                                    msg.new_server_mac_key_ct)
            if len(new_server_key) != 32:
                raise MalformedKey("server MAC key must be 32 bytes")

        # a shared nonce goes only after every key has been accepted
        for nonce in nonces_used:
            self.nonces.consume(nonce)
        sess.key_table.update(staged)
        if new_server_key is not None:
            sess.derived = derived.with_server_key(new_server_key)
        for entry in staged.values():
            if entry.kcb.allows(ControlBits.ANTI_ROLLBACK_REQUIRED):
                log.warning("key %s requires anti-rollback; not enforced", entry.key_id.hex())
                self.tracer.emit(39, session_id, "OK", entry.key_id, False)
        return len(staged)

    @_traced(16, inp="response")
    def refresh_keys(self, session_id: int, response: bytes) -> None:
        """Apply new TTLs. Key bytes and control bits are never touched."""
        sess = self._session(session_id)
        derived = self._license_keys(sess)
        self._verify_server_mac(derived, response)
        msg = wire.decode(response)
        if not isinstance(msg, wire.RefreshResponse):
            raise MalformedFrame(f"expected a refresh response, got {type(msg).__name__}")
        if msg.nonce not in self.nonces:
            raise StaleNonce(f"nonce {msg.nonce:08x} is not live")
        now = self.clock.now()
        staged = {}
        for entry in msg.key_entries:
            current = sess.key_table.get(entry.key_id)
            if current is None:
                raise UnknownKeyId(f"key {entry.key_id.hex()} is not loaded")
            if entry.kcb_encrypted:
                if entry.iv is None:
                    raise MalformedFrame("encrypted refresh KCB without an iv")
                raw = crypto.aes_cbc_decrypt(current.key, entry.iv, entry.kcb_blob)
            else:
                raw = entry.kcb_blob
            update = self._parse_kcb(raw)
            staged[entry.key_id] = replace(current, kcb=current.kcb.with_ttl(update.ttl),
                                           loaded_at=now)
        self.nonces.consume(msg.nonce)
        sess.key_table.update(staged)

    @_traced(41, inp="key_id", out=lambda kcb: kcb.serialize())
    def query_key_control(self, session_id: int, key_id: bytes) -> KeyControlBlock:
        sess = self._session(session_id)
        try:
            return sess.key_table[key_id].kcb
        except KeyError:
            raise UnknownKeyId(f"key {key_id.hex()} is not loaded") from None

    # -- decryption ----------------------------------------------------------

    @_traced(17, inp="key_id")
    def select_key(self, session_id: int, key_id: bytes) -> None:
        sess = self._session(session_id)
        if key_id not in sess.key_table:
            raise UnknownKeyId(f"key {key_id.hex()} is not loaded")
        sess.selected_key = key_id

    @_traced(48, inp=_subsample_bytes)
    def decrypt_cenc(self, session_id: int, subsamples: Sequence, iv: bytes) -> bytes:
        entry = self._usable_key(self._session(session_id), ControlBits.ALLOW_CONTENT_DECRYPT)
        return cenc.transform(entry.key, iv, [cenc.Subsample(*s) for s in subsamples])

    @_traced(24, inp="data")
    def generic_encrypt(self, session_id: int, data: bytes, iv: bytes) -> bytes:
        entry = self._usable_key(self._session(session_id), ControlBits.ALLOW_GENERIC_ENCRYPT)
        return crypto.aes_cbc_encrypt(entry.key, iv, data)

    @_traced(25, inp="data")
    def generic_decrypt(self, session_id: int, data: bytes, iv: bytes) -> bytes:
        entry = self._usable_key(self._session(session_id), ControlBits.ALLOW_GENERIC_DECRYPT)
        return crypto.aes_cbc_decrypt(entry.key, iv, data)

    @_traced(26, inp="data")
    def generic_sign(self, session_id: int, data: bytes) -> bytes:
        entry = self._usable_key(self._session(session_id), ControlBits.ALLOW_GENERIC_SIGN)
        return crypto.hmac_sha256(entry.key, data)

    @_traced(27, inp="data")
    def generic_verify(self, session_id: int, data: bytes, signature: bytes) -> bool:
        entry = self._usable_key(self._session(session_id), ControlBits.ALLOW_GENERIC_VERIFY)
        return crypto.tags_equal(crypto.hmac_sha256(entry.key, data), signature)

    def generic_crypto(self, session_id: int, op: GenericOp, payload: bytes,
                       iv: bytes | None = None, signature: bytes | None = None):
        op = GenericOp(op)
        if op is GenericOp.ENCRYPT:
            return self.generic_encrypt(session_id, payload, iv)
        if op is GenericOp.DECRYPT:
            return self.generic_decrypt(session_id, payload, iv)
        if op is GenericOp.SIGN:
            return self.generic_sign(session_id, payload)
        return self.generic_verify(session_id, payload, signature)

    # -- usage tables are out of scope ---------------------------------------

    def _unsupported(self):
        raise Unsupported("usage tables are not implemented")

    supports_usage_table = _traced(29)(lambda self: self._unsupported())
    update_usage_table = _traced(30)(lambda self: self._unsupported())
    deactivate_usage_entry = _traced(31)(lambda self, *args: self._unsupported())
    report_usage = _traced(32)(lambda self, *args: self._unsupported())
    delete_usage_entry = _traced(33)(lambda self, *args: self._unsupported())
    delete_usage_table = _traced(34)(lambda self: self._unsupported())
    force_delete_usage_entry = _traced(43)(lambda self, *args: self._unsupported())
