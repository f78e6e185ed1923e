"""Host-side library: builds requests, talks to the servers, drives the CDM.

This is the layer that sits between an application and the CDM. It owns
the persisted credential file and the device blob, and never sees a key.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from . import crypto, wire
from .cdm import Cdm, DeviceRsaCredential
from .errors import BadStorageMac, MalformedKey, ProtocolError, UnknownSession
from .keybox import Keybox

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeviceInfo:
    model: str = "wvsim-handset"
    arch: str = "x86_64"
    cdm_version: str = "16.1.0"
    build: str = "wvsim-1"

    def blob(self) -> bytes:
        """model || arch || cdm_version || build, each prefixed by a u16 length."""
        out = bytearray()
        for part in (self.model, self.arch, self.cdm_version, self.build):
            raw = part.encode("utf-8")
            out += struct.pack(">H", len(raw)) + raw
        return bytes(out)


class PhaseError(ProtocolError):
    """A protocol failure labelled with the phase it happened in."""

    def __init__(self, phase: str, cause: Exception):
        kind = getattr(cause, "kind", type(cause).__name__)
        super().__init__(f"{phase} failed: {kind}: {cause}")
        self.phase = phase
        self.cause = cause

    @property
    def kind(self) -> str:
        return getattr(self.cause, "kind", type(self.cause).__name__)


class CdmClient:
    def __init__(self, cdm: Cdm, transport, keybox: Keybox, *,
                 storage_key: bytes,
                 credential_path: str | os.PathLike | None = None,
                 device_info: DeviceInfo | None = None,
                 sig_scheme: int = crypto.SCHEME_PSS,
                 randbytes: crypto.RandomSource = os.urandom):
        self.cdm = cdm
        self.transport = transport
        self.keybox = keybox
        self.storage_key = storage_key
        self.credential_path = Path(credential_path) if credential_path else None
        self.device_info = device_info or DeviceInfo()
        self.sig_scheme = sig_scheme
        self._randbytes = randbytes
        self._credential: DeviceRsaCredential | None = None
        self._request_ids: dict[int, bytes] = {}

    # -- certificate provisioning --------------------------------------------

    def provision(self, sid: int) -> DeviceRsaCredential:
        try:
            nonce = self.cdm.generate_nonce(sid)
            self.cdm.generate_derived_keys(sid, self.keybox)
            req = wire.ProvisioningRequest(
                nonce=nonce,
                device_id=self.keybox.device_id,
                provisioning_token=self.keybox.provisioning_token,
            )
            covered = wire.mac_input(req)
            frame = covered + self.cdm.generate_signature(sid, covered)
            response = self.transport.exchange(frame)
            cred = self.cdm.rewrap_device_rsa_key(sid, response, self.storage_key)
        except ProtocolError as exc:
            raise PhaseError("provisioning", exc) from exc
        self._credential = cred
        if self.credential_path is not None:
            self._persist(cred)
        return cred

    def _persist(self, cred: DeviceRsaCredential) -> None:
        tmp = self.credential_path.with_name(self.credential_path.name + ".tmp")
        tmp.write_bytes(cred.to_bytes())
        os.replace(tmp, self.credential_path)

    def stored_credential(self) -> bytes | None:
        if self._credential is not None:
            return self._credential.to_bytes()
        if self.credential_path is not None and self.credential_path.exists():
            return self.credential_path.read_bytes()
        return None

    def load_device_key(self, sid: int) -> bool:
        """Load the stored credential, provisioning first if it is missing or corrupt.

        Returns True when a new provisioning round trip was needed.
        """
        stored = self.stored_credential()
        if stored is not None:
            try:
                self.cdm.load_device_rsa_key(sid, stored, self.storage_key)
                return False
            except (BadStorageMac, MalformedKey) as exc:
                log.warning("stored credential unusable (%s); provisioning again", exc.kind)
        cred = self.provision(sid)
        try:
            self.cdm.load_device_rsa_key(sid, cred, self.storage_key)
        except ProtocolError as exc:
            raise PhaseError("provisioning", exc) from exc
        return True

    # -- license acquisition -------------------------------------------------

    def build_license_request(self, sid: int, key_ids: Sequence[bytes]) -> bytes:
        nonce = self.cdm.generate_nonce(sid)
        request_id = self._randbytes(16)
        self._request_ids[sid] = request_id
        req = wire.LicenseRequest(
            nonce=nonce,
            device_id=self.keybox.device_id,
            device_blob=self.device_info.blob(),
            request_id=request_id,
            sig_scheme=self.sig_scheme,
            key_ids=tuple(key_ids),
        )
        signature = self.cdm.generate_rsa_signature(sid, wire.signing_input(req), self.sig_scheme)
        return wire.encode(replace(req, rsa_signature=signature))

    def process_license_response(self, sid: int, response: bytes) -> int:
        msg = wire.decode(response)
        if not isinstance(msg, wire.LicenseResponse):
            raise wire.MalformedFrame("expected a license response")
        self.cdm.derive_keys_from_session_key(sid, msg.enc_session_key, self.device_info.blob())
        return self.cdm.load_keys(sid, response)

    def acquire_license(self, sid: int, key_ids: Sequence[bytes]) -> int:
        try:
            response = self.transport.exchange(self.build_license_request(sid, key_ids))
            return self.process_license_response(sid, response)
        except ProtocolError as exc:
            raise PhaseError("license", exc) from exc

    def refresh(self, sid: int, key_id: bytes, ttl: int | None = None) -> None:
        try:
            if sid not in self._request_ids:
                raise UnknownSession(f"no license was acquired in session {sid:08x}")
            req = wire.RefreshRequest(
                nonce=self.cdm.generate_nonce(sid),
                request_id=self._request_ids[sid],
                key_id=key_id,
                ttl=ttl,
            )
            covered = wire.mac_input(req)
            response = self.transport.exchange(covered + self.cdm.generate_signature(sid, covered))
            self.cdm.refresh_keys(sid, response)
        except ProtocolError as exc:
            raise PhaseError("refresh", exc) from exc
