"""End-to-end flows behind the CLI: the full ladder and the two-session generic demo."""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import cenc
from .cdm import Cdm
from .clock import MonotonicClock, ScriptedClock
from .config import RunConfig
from .errors import ConfigError, IntegrityError, ProtocolError
from .host import CdmClient, PhaseError
from .keybox import KeyboxStatus, load_keybox_file, storage_key_for, validate_keybox
from .servers import Backend, CencPackage, Keystore, encrypt_content
from .trace import Tracer
from .transport import InProcessTransport, LoopbackTransport, parse_endpoint

log = logging.getLogger(__name__)

STREAM_CDM, STREAM_HOST, STREAM_SERVER, STREAM_PACKAGER = range(4)


@dataclass
class E2EResult:
    provisioned: bool
    keys_loaded: int
    bytes_decrypted: int
    trace: list[str] = field(default_factory=list)


@dataclass
class GenericResult:
    ciphertext: bytes
    roundtrip_ok: bool
    tag: bytes
    verified: bool
    tamper_rejected: bool
    trace: list[str] = field(default_factory=list)


def build_keystore(cfg: RunConfig) -> Keystore:
    ks = Keystore()
    for path in cfg.known_keyboxes:
        kb = load_keybox_file(path)
        if validate_keybox(kb) is KeyboxStatus.OK:
            ks.register_keybox(kb)
        else:
            log.warning("skipping invalid keybox %s", path)
    for spec in cfg.content_keys:
        ks.add_content_key(spec)
    if cfg.server_state is not None and cfg.server_state.exists():
        ks.load_device_keys(cfg.server_state)
    return ks


def build_backend(cfg: RunConfig) -> Backend:
    return Backend(
        build_keystore(cfg),
        randbytes=cfg.random_source(STREAM_SERVER),
        deterministic_keys=cfg.deterministic,
        rotate_server_mac_key=cfg.rotate_server_mac_key,
        state_path=cfg.server_state,
    )


@contextlib.contextmanager
def _client(cfg: RunConfig, clock=None):
    kb = load_keybox_file(cfg.keybox)
    status = validate_keybox(kb)
    if status is not KeyboxStatus.OK:
        raise IntegrityError(f"keybox {cfg.keybox} is invalid: {status.value}")
    if cfg.in_process:
        transport = InProcessTransport(build_backend(cfg))
    else:
        transport = LoopbackTransport(*parse_endpoint(cfg.server))
    if clock is None:
        clock = ScriptedClock() if cfg.clock == "scripted" else MonotonicClock()
    trace_fh = open(cfg.trace, "w") if cfg.trace is not None else None
    try:
        cdm = Cdm(kb, clock=clock, randbytes=cfg.random_source(STREAM_CDM),
                  tracer=Tracer(trace_fh))
        yield CdmClient(
            cdm, transport, kb,
            storage_key=storage_key_for(kb),
            credential_path=cfg.credential,
            device_info=cfg.device,
            sig_scheme=cfg.signature_scheme,
            randbytes=cfg.random_source(STREAM_HOST),
        )
    finally:
        transport.close()
        if trace_fh is not None:
            trace_fh.close()


def _packager_keystore(cfg: RunConfig) -> Keystore:
    ks = Keystore()
    for spec in cfg.content_keys:
        ks.add_content_key(spec)
    return ks


def package_content(cfg: RunConfig, key_id: bytes, plaintext: bytes) -> list[CencPackage]:
    """CDN role: split into samples and CENC-encrypt each under ``key_id``."""
    ks = _packager_keystore(cfg)
    rng = cfg.random_source(STREAM_PACKAGER)
    packages = []
    for start in range(0, len(plaintext), cfg.sample_size):
        sample = plaintext[start:start + cfg.sample_size]
        plan = cenc.uniform_plan(len(sample), *cfg.subsample_pattern)
        packages.append(encrypt_content(ks, key_id, sample, plan, rng))
    return packages


def write_package(packages: list[CencPackage], data_path: Path) -> Path:
    """Raw encrypted bytes plus a JSON sidecar with per-sample IVs and subsample plans."""
    sidecar = data_path.with_name(data_path.name + ".json")
    with open(data_path, "wb") as fh:
        for pkg in packages:
            fh.write(pkg.data)
    sidecar.write_text(json.dumps({
        "samples": [
            {"iv": pkg.iv.hex(), "subsamples": [[s.clear_len, s.protected_len] for s in pkg.subsamples]}
            for pkg in packages
        ]
    }, indent=1))
    return sidecar


def read_package(data_path: Path) -> list[CencPackage]:
    sidecar = json.loads(data_path.with_name(data_path.name + ".json").read_text())
    data = data_path.read_bytes()
    packages, pos = [], 0
    for sample in sidecar["samples"]:
        subs = []
        for clear, protected in sample["subsamples"]:
            subs.append(cenc.Subsample(clear, protected, data[pos:pos + clear + protected]))
            pos += clear + protected
        packages.append(CencPackage(bytes.fromhex(sample["iv"]), subs))
    if pos != len(data):
        raise ValueError("package sidecar does not cover the data file")
    return packages


def run_e2e(cfg: RunConfig, input_path: Path, output_path: Path,
            package_path: Path | None = None, clock=None) -> E2EResult:
    """Provision if needed, license, select, decrypt every sample, close."""
    if cfg.content_key_id is None:
        raise ConfigError("no content key configured")
    plaintext = Path(input_path).read_bytes()
    package_path = Path(package_path or str(output_path) + ".cenc")
    write_package(package_content(cfg, cfg.content_key_id, plaintext), package_path)
    packages = read_package(package_path)

    with _client(cfg, clock) as client:
        cdm = client.cdm
        sid = cdm.open_session()
        try:
            provisioned = client.load_device_key(sid)
            loaded = client.acquire_license(sid, [cfg.content_key_id])
            try:
                cdm.select_key(sid, cfg.content_key_id)
                out = bytearray()
                for pkg in packages:
                    out += cdm.decrypt_cenc(sid, pkg.subsamples, pkg.iv)
            except ProtocolError as exc:
                raise PhaseError("decrypt", exc) from exc
        finally:
            cdm.close_session(sid)
        Path(output_path).write_bytes(bytes(out))
        return E2EResult(provisioned, loaded, len(out), cdm.tracer.lines())


def run_generic_session(cfg: RunConfig, payload: bytes, clock=None) -> GenericResult:
    """License session for media plus a second session driving the generic crypto API."""
    cipher_id = cfg.generic_cipher_key_id
    mac_id = cfg.generic_mac_key_id or cipher_id
    if cipher_id is None or cfg.content_key_id is None:
        raise ConfigError("generic-session needs content_key_id and generic.cipher_key_id")

    media = package_content(cfg, cfg.content_key_id, payload or b"\x00")
    with _client(cfg, clock) as client:
        cdm = client.cdm
        license_sid = cdm.open_session()
        generic_sid = None
        try:
            client.load_device_key(license_sid)
            client.acquire_license(license_sid, [cfg.content_key_id])
            try:
                cdm.select_key(license_sid, cfg.content_key_id)
                for pkg in media:
                    cdm.decrypt_cenc(license_sid, pkg.subsamples, pkg.iv)
            except ProtocolError as exc:
                raise PhaseError("decrypt", exc) from exc

            generic_sid = cdm.open_session()
            client.load_device_key(generic_sid)
            client.acquire_license(generic_sid, list(dict.fromkeys([cipher_id, mac_id])))
            try:
                iv = cdm.get_random(16)
                cdm.select_key(generic_sid, cipher_id)
                ciphertext = cdm.generic_encrypt(generic_sid, payload, iv)
                roundtrip = cdm.generic_decrypt(generic_sid, ciphertext, iv) == payload
                cdm.select_key(generic_sid, mac_id)
                tag = cdm.generic_sign(generic_sid, payload)
                verified = cdm.generic_verify(generic_sid, payload, tag)
                tampered = cdm.generic_verify(generic_sid, payload + b"\x00", tag)
            except ProtocolError as exc:
                raise PhaseError("generic", exc) from exc
        finally:
            if generic_sid is not None:
                cdm.close_session(generic_sid)
            cdm.close_session(license_sid)
        return GenericResult(iv + ciphertext, roundtrip, tag, verified, not tampered,
                             cdm.tracer.lines())
