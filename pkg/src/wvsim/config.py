"""Run configuration: one JSON file, with environment overrides for paths.

Example::

    {
      "keybox": "keybox.bin",
      "credential": "cert.bin",
      "server_state": "server_state.json",
      "trace": "trace.log",
      "server": "in-process",              # or "127.0.0.1:7000"
      "signature_scheme": "pss",           # or "pkcs1v15"
      "clock": "real",                     # "scripted" needs an in-process server
      "deterministic_seed": null,          # integer -> reproducible run
      "rotate_server_mac_key": false,
      "known_keyboxes": ["keybox.bin"],
      "device": {"model": "...", "arch": "...", "cdm_version": "...", "build": "..."},
      "content_keys": [
        {"key_id": "<32 hex>", "key": "<32 hex>",
         "control_bits": ["allow_content_decrypt", "nonce_required"], "ttl": 0}
      ],
      "content_key_id": "<32 hex>",        # defaults to the first content key
      "generic": {"cipher_key_id": "<32 hex>", "mac_key_id": "<32 hex>"},
      "sample_size": 65536,
      "subsample_pattern": [32, 4064]
    }

Relative paths are resolved against the directory holding the config file.
``WVSIM_KEYBOX``, ``WVSIM_CREDENTIAL``, ``WVSIM_SERVER_STATE``, ``WVSIM_TRACE``
and ``WVSIM_SERVER`` override the matching keys.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

from . import crypto
from .errors import ConfigError
from .host import DeviceInfo
from .kcb import parse_control_bits
from .servers import ContentKeySpec

IN_PROCESS = "in-process"

ENV_OVERRIDES = {
    "WVSIM_KEYBOX": "keybox",
    "WVSIM_CREDENTIAL": "credential",
    "WVSIM_SERVER_STATE": "server_state",
    "WVSIM_TRACE": "trace",
    "WVSIM_SERVER": "server",
}
_SCHEMES = {"pss": crypto.SCHEME_PSS, "pkcs1v15": crypto.SCHEME_PKCS1V15}


@dataclass
class RunConfig:
    keybox: Path
    credential: Path
    server_state: Path | None
    trace: Path | None
    server: str = IN_PROCESS
    signature_scheme: int = crypto.SCHEME_PSS
    clock: str = "real"
    deterministic_seed: int | None = None
    rotate_server_mac_key: bool = False
    known_keyboxes: list[Path] = field(default_factory=list)
    device: DeviceInfo = field(default_factory=DeviceInfo)
    content_keys: list[ContentKeySpec] = field(default_factory=list)
    content_key_id: bytes | None = None
    generic_cipher_key_id: bytes | None = None
    generic_mac_key_id: bytes | None = None
    sample_size: int = 65536
    subsample_pattern: tuple[int, int] = (32, 4064)

    @property
    def in_process(self) -> bool:
        return self.server == IN_PROCESS

    @property
    def deterministic(self) -> bool:
        return self.deterministic_seed is not None

    def random_source(self, stream: int) -> crypto.RandomSource:
        """Independent byte source per component (0 cdm, 1 host, 2 server, 3 packager)."""
        if self.deterministic_seed is None:
            return crypto.system_random
        return crypto.seeded_random(self.deterministic_seed * 16 + stream)


def _hex_key(value, what: str, size: int = 16) -> bytes:
    try:
        raw = bytes.fromhex(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be hex") from None
    if len(raw) != size:
        raise ConfigError(f"{what} must be {size} bytes")
    return raw


def parse_config(data: Mapping, base_dir: Path, env: Mapping[str, str] | None = None) -> RunConfig:
    data = dict(data)
    for var, key in ENV_OVERRIDES.items():
        if env and env.get(var):
            data[key] = env[var]

    def path(key, default=None):
        value = data.get(key, default)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base_dir / p

    if "keybox" not in data:
        raise ConfigError("config needs a keybox path")
    scheme = str(data.get("signature_scheme", "pss")).lower()
    if scheme not in _SCHEMES:
        raise ConfigError(f"signature_scheme must be one of {sorted(_SCHEMES)}")
    clock = data.get("clock", "real")
    if clock not in ("real", "scripted"):
        raise ConfigError("clock must be 'real' or 'scripted'")
    server = data.get("server", IN_PROCESS)
    if clock == "scripted" and server != IN_PROCESS:
        raise ConfigError("a scripted clock needs the in-process server")
    seed = data.get("deterministic_seed")
    if seed is not None and not isinstance(seed, int):
        raise ConfigError("deterministic_seed must be an integer or null")

    keys = []
    for i, entry in enumerate(data.get("content_keys", [])):
        try:
            bits = parse_control_bits(entry.get("control_bits", ["allow_content_decrypt", "nonce_required"]))
        except ValueError as exc:
            raise ConfigError(f"content_keys[{i}]: {exc}") from None
        ttl = entry.get("ttl", 0)
        if not isinstance(ttl, int) or not 0 <= ttl <= 0xFFFFFFFF:
            raise ConfigError(f"content_keys[{i}].ttl must be a u32")
        keys.append(ContentKeySpec(
            key_id=_hex_key(entry.get("key_id"), f"content_keys[{i}].key_id"),
            key=_hex_key(entry.get("key"), f"content_keys[{i}].key"),
            control_bits=int(bits),
            ttl=ttl,
        ))

    def key_id(value, what):
        return None if value is None else _hex_key(value, what)

    generic = data.get("generic", {})
    pattern = data.get("subsample_pattern", [32, 4064])
    if (not isinstance(pattern, (list, tuple)) or len(pattern) != 2
            or min(pattern) < 0 or sum(pattern) == 0):
        raise ConfigError("subsample_pattern must be [clear, protected]")
    sample_size = data.get("sample_size", 65536)
    if not isinstance(sample_size, int) or sample_size <= 0:
        raise ConfigError("sample_size must be a positive integer")
    try:
        device = DeviceInfo(**data.get("device", {}))
    except TypeError as exc:
        raise ConfigError(f"device: {exc}") from None

    return RunConfig(
        keybox=path("keybox"),
        credential=path("credential", "cert.bin"),
        server_state=path("server_state"),
        trace=path("trace"),
        server=server,
        signature_scheme=_SCHEMES[scheme],
        clock=clock,
        deterministic_seed=seed,
        rotate_server_mac_key=bool(data.get("rotate_server_mac_key", False)),
        known_keyboxes=[base_dir / p if not Path(p).is_absolute() else Path(p)
                        for p in data.get("known_keyboxes", [])],
        device=device,
        content_keys=keys,
        content_key_id=key_id(data.get("content_key_id"), "content_key_id")
        or (keys[0].key_id if keys else None),
        generic_cipher_key_id=key_id(generic.get("cipher_key_id"), "generic.cipher_key_id"),
        generic_mac_key_id=key_id(generic.get("mac_key_id"), "generic.mac_key_id"),
        sample_size=sample_size,
        subsample_pattern=(int(pattern[0]), int(pattern[1])),
    )


def load_config(path, env: Mapping[str, str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(data, path.parent, os.environ if env is None else env)


def default_config_data(randbytes: crypto.RandomSource = crypto.system_random) -> dict:
    """Fresh config body with one media key and one generic-crypto key."""
    media_id, generic_id = randbytes(16), randbytes(16)
    return {
        "keybox": "keybox.bin",
        "credential": "cert.bin",
        "server_state": "server_state.json",
        "trace": "trace.log",
        "server": IN_PROCESS,
        "signature_scheme": "pss",
        "clock": "real",
        "deterministic_seed": None,
        "rotate_server_mac_key": False,
        "known_keyboxes": [],
        "device": asdict(DeviceInfo()),
        "content_keys": [
            {"key_id": media_id.hex(), "key": randbytes(16).hex(),
             "control_bits": ["allow_content_decrypt", "nonce_required"], "ttl": 0},
            {"key_id": generic_id.hex(), "key": randbytes(16).hex(),
             "control_bits": ["allow_generic_encrypt", "allow_generic_decrypt",
                              "allow_generic_sign", "allow_generic_verify", "nonce_required"],
             "ttl": 0},
        ],
        "content_key_id": media_id.hex(),
        "generic": {"cipher_key_id": generic_id.hex(), "mac_key_id": generic_id.hex()},
        "sample_size": 65536,
        "subsample_pattern": [32, 4064],
    }
