"""Simulated provisioning and license servers, plus the content packager.

The servers mirror the client ladder: provisioning re-derives the keybox keys
from the stored device key, licensing derives from a fresh session key that
travels RSA-OAEP encrypted. Replay defence is the client's job; the servers
keep no nonce state.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import cenc, crypto, wire
from .errors import (
    BadClientMac,
    BadSignature,
    MalformedFrame,
    UnknownDevice,
    UnknownKeyId,
    WvSimError,
)
from .kcb import ControlBits, KeyControlBlock
from .keybox import Keybox
from .ladder import DerivedKeySet, build_contexts, derive_keys

log = logging.getLogger(__name__)

DEFAULT_CONTROL_BITS = ControlBits.ALLOW_CONTENT_DECRYPT | ControlBits.NONCE_REQUIRED


@dataclass(frozen=True)
class ContentKeySpec:
    key_id: bytes
    key: bytes
    control_bits: int = int(DEFAULT_CONTROL_BITS)
    ttl: int = 0

    def __repr__(self) -> str:
        return f"ContentKeySpec(key_id={self.key_id.hex()}, bits={self.control_bits:#x}, ttl={self.ttl})"


@dataclass
class LicenseRecord:
    device_id: bytes
    derived: DerivedKeySet
    key_ids: tuple[bytes, ...]


@dataclass(frozen=True)
class CencPackage:
    iv: bytes
    subsamples: list[cenc.Subsample]

    @property
    def data(self) -> bytes:
        return b"".join(s.data for s in self.subsamples)


@dataclass
class Keystore:
    known_keyboxes: dict[bytes, tuple[bytes, bytes]] = field(default_factory=dict)
    device_keys: dict[bytes, object] = field(default_factory=dict)
    device_certs: dict[bytes, object] = field(default_factory=dict)
    content_keys: dict[bytes, ContentKeySpec] = field(default_factory=dict)
    licenses: dict[bytes, LicenseRecord] = field(default_factory=dict)

    def register_keybox(self, kb: Keybox) -> None:
        self.known_keyboxes[kb.device_id] = (kb.device_key, kb.provisioning_token)

    def add_content_key(self, spec: ContentKeySpec) -> None:
        if len(spec.key_id) != wire.KEY_ID_SIZE or len(spec.key) != 16:
            raise ValueError("content keys need a 16-byte id and a 16-byte key")
        self.content_keys[spec.key_id] = spec

    def content_key(self, key_id: bytes) -> ContentKeySpec:
        try:
            return self.content_keys[key_id]
        except KeyError:
            raise UnknownKeyId(f"no content key {key_id.hex()}") from None

    def save_device_keys(self, path) -> None:
        """Persist issued device RSA keys so a restarted server still knows them."""
        state = {did.hex(): crypto.rsa_to_pkcs8(key).hex() for did, key in self.device_keys.items()}
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps({"device_rsa_keys": state}, indent=2, sort_keys=True))
        os.replace(tmp, path)

    def load_device_keys(self, path) -> None:
        state = json.loads(Path(path).read_text())
        for did_hex, pkcs8_hex in state.get("device_rsa_keys", {}).items():
            key = crypto.rsa_from_pkcs8(bytes.fromhex(pkcs8_hex))
            self.device_keys[bytes.fromhex(did_hex)] = key
            self.device_certs[bytes.fromhex(did_hex)] = key.public_key()


def _sign_response(msg, mac_key: bytes):
    return replace(msg, hmac_tag=crypto.hmac_sha256(mac_key, wire.mac_input(msg)))


def _check_client_mac(req, mac_key: bytes) -> None:
    expected = crypto.hmac_sha256(mac_key, wire.mac_input(req))
    if not crypto.tags_equal(expected, req.hmac_tag):
        raise BadClientMac("request tag does not verify")


class ProvisioningServer:
    def __init__(self, keystore: Keystore, randbytes: crypto.RandomSource = os.urandom,
                 deterministic_keys: bool = False, state_path=None):
        self.keystore = keystore
        self._randbytes = randbytes
        self._deterministic = deterministic_keys
        self._state_path = state_path

    def derived_keys_for(self, device_id: bytes) -> DerivedKeySet:
        """Server-side mirror of the client's keybox derivation."""
        try:
            device_key, token = self.keystore.known_keyboxes[device_id]
        except KeyError:
            raise UnknownDevice(f"unknown device {device_id.hex()}") from None
        return derive_keys(device_key, build_contexts(token + device_id))

    def _device_rsa_key(self, device_id: bytes):
        key = self.keystore.device_keys.get(device_id)
        if key is None:
            key = crypto.generate_rsa_key(self._randbytes if self._deterministic else None)
            self.keystore.device_keys[device_id] = key
            self.keystore.device_certs[device_id] = key.public_key()
            if self._state_path is not None:
                self.keystore.save_device_keys(self._state_path)
        return key

    def handle_provisioning_request(self, req: wire.ProvisioningRequest) -> wire.ProvisioningResponse:
        derived = self.derived_keys_for(req.device_id)
        _check_client_mac(req, derived.mac_client_key)
        pkcs8 = crypto.rsa_to_pkcs8(self._device_rsa_key(req.device_id))
        iv = self._randbytes(16)
        resp = wire.ProvisioningResponse(
            nonce=req.nonce,
            device_id=req.device_id,
            iv=iv,
            ciphertext=crypto.aes_cbc_encrypt(derived.asset_key, iv, pkcs8),
        )
        return _sign_response(resp, derived.mac_server_key)


class LicenseServer:
    def __init__(self, keystore: Keystore, randbytes: crypto.RandomSource = os.urandom,
                 rotate_server_mac_key: bool = False):
        self.keystore = keystore
        self._randbytes = randbytes
        self.rotate_server_mac_key = rotate_server_mac_key

    def handle_license_request(self, req: wire.LicenseRequest) -> wire.LicenseResponse:
        cert = self.keystore.device_certs.get(req.device_id)
        if cert is None:
            raise UnknownDevice(f"device {req.device_id.hex()} has no certificate")
        if not crypto.rsa_verify(cert, req.rsa_signature, wire.signing_input(req), req.sig_scheme):
            raise BadSignature("license request signature does not verify")
        specs = [self.keystore.content_key(kid) for kid in req.key_ids]

        session_key = self._randbytes(16)
        enc_session_key = crypto.rsa_oaep_encrypt(cert, session_key, self._randbytes)
        derived = derive_keys(session_key, build_contexts(req.device_blob))

        entries = []
        for spec in specs:
            iv = self._randbytes(16)
            kcb = KeyControlBlock(nonce=req.nonce, ttl=spec.ttl, control_bits=spec.control_bits)
            entries.append(wire.KeyEntry(
                key_id=spec.key_id,
                iv=iv,
                enc_key=crypto.aes_cbc_encrypt(derived.asset_key, iv, spec.key),
                kcb_blob=crypto.aes_cbc_encrypt(spec.key, iv, kcb.serialize()),
                kcb_encrypted=True,
            ))

        resp = wire.LicenseResponse(
            nonce=req.nonce,
            request_id=req.request_id,
            enc_session_key=enc_session_key,
            key_entries=tuple(entries),
        )
        record_keys = derived
        if self.rotate_server_mac_key:
            new_key = self._randbytes(32)
            iv = self._randbytes(16)
            resp = replace(resp, iv=iv,
                           new_server_mac_key_ct=crypto.aes_cbc_encrypt(derived.asset_key, iv, new_key))
            record_keys = derived.with_server_key(new_key)
        self.keystore.licenses[req.request_id] = LicenseRecord(
            req.device_id, record_keys, tuple(req.key_ids))
        # signed under the key the client holds now; rotation applies afterwards
        return _sign_response(resp, derived.mac_server_key)

    def handle_refresh_request(self, req: wire.RefreshRequest) -> wire.RefreshResponse:
        record = self.keystore.licenses.get(req.request_id)
        if record is None:
            raise UnknownKeyId(f"no license {req.request_id.hex()}")
        _check_client_mac(req, record.derived.mac_client_key)
        if req.key_id not in record.key_ids:
            raise UnknownKeyId(f"key {req.key_id.hex()} is not part of this license")
        spec = self.keystore.content_key(req.key_id)
        ttl = spec.ttl if req.ttl is None else req.ttl
        kcb = KeyControlBlock(nonce=req.nonce, ttl=ttl, control_bits=spec.control_bits)
        iv = self._randbytes(16)
        resp = wire.RefreshResponse(
            nonce=req.nonce,
            request_id=req.request_id,
            key_entries=(wire.KeyEntry(
                key_id=req.key_id,
                iv=iv,
                kcb_blob=crypto.aes_cbc_encrypt(spec.key, iv, kcb.serialize()),
                kcb_encrypted=True,
            ),),
        )
        return _sign_response(resp, record.derived.mac_server_key)


def encrypt_content(keystore: Keystore, key_id: bytes, plaintext: bytes,
                    subsample_plan: Sequence[tuple[int, int]],
                    randbytes: crypto.RandomSource = os.urandom) -> CencPackage:
    """CDN side: CENC-encrypt one sample under a stored content key."""
    spec = keystore.content_key(key_id)
    if not plaintext:
        return CencPackage(randbytes(16), [])
    iv = randbytes(16)
    clear = cenc.split(plaintext, subsample_plan)
    data = cenc.transform(spec.key, iv, clear)
    out, pos = [], 0
    for s in clear:
        n = s.clear_len + s.protected_len
        out.append(cenc.Subsample(s.clear_len, s.protected_len, data[pos:pos + n]))
        pos += n
    return CencPackage(iv, out)


class Backend:
    """Provisioning + license servers over one keystore, with a frame-level entry point."""

    def __init__(self, keystore: Keystore | None = None, *,
                 randbytes: crypto.RandomSource = os.urandom,
                 deterministic_keys: bool = False,
                 rotate_server_mac_key: bool = False,
                 state_path=None):
        self.keystore = keystore or Keystore()
        self.provisioning = ProvisioningServer(self.keystore, randbytes, deterministic_keys, state_path)
        self.license = LicenseServer(self.keystore, randbytes, rotate_server_mac_key)
        self._randbytes = randbytes
        self._lock = threading.Lock()

    def handle_provisioning_request(self, req):
        with self._lock:
            return self.provisioning.handle_provisioning_request(req)

    def handle_license_request(self, req):
        with self._lock:
            return self.license.handle_license_request(req)

    def handle_refresh_request(self, req):
        with self._lock:
            return self.license.handle_refresh_request(req)

    def encrypt_content(self, key_id, plaintext, subsample_plan) -> CencPackage:
        with self._lock:
            return encrypt_content(self.keystore, key_id, plaintext, subsample_plan, self._randbytes)

    def handle_frame(self, frame: bytes) -> bytes:
        """Decode, dispatch and encode; every failure becomes an error frame."""
        try:
            msg = wire.decode(frame)
            if isinstance(msg, wire.ProvisioningRequest):
                resp = self.handle_provisioning_request(msg)
            elif isinstance(msg, wire.LicenseRequest):
                resp = self.handle_license_request(msg)
            elif isinstance(msg, wire.RefreshRequest):
                resp = self.handle_refresh_request(msg)
            else:
                raise MalformedFrame(f"{type(msg).__name__} is not a request")
        except WvSimError as exc:
            log.info("request rejected: %s", exc.kind)
            return wire.error_frame(exc.kind, str(exc))
        log.info("handled %s", type(msg).__name__)
        return wire.encode(resp)
