"""Deterministic `.wvmsg` fixtures, one per message type.

The fixtures come from a real protocol run (provision, license, refresh)
with every entropy source seeded, so they are byte-stable and each response
verifies under the keys the run derived.

    python -m wvsim.golden tests/golden
"""

from __future__ import annotations

import sys
from pathlib import Path

from . import crypto, wire
from .cdm import Cdm
from .clock import ScriptedClock
from .host import CdmClient
from .kcb import ControlBits
from .keybox import generate_keybox, storage_key_for
from .servers import Backend, ContentKeySpec, Keystore
from .transport import InProcessTransport

GOLDEN_SEED = 20171
FIXTURE_NAMES = ("prov_req", "prov_resp", "lic_req", "lic_resp",
                 "refresh_req", "refresh_resp", "error")


class _Recorder:
    def __init__(self, inner):
        self.inner = inner
        self.frames: list[tuple[bytes, bytes]] = []

    def exchange(self, frame: bytes) -> bytes:
        reply = self.inner.exchange(frame)
        self.frames.append((frame, reply))
        return reply

    def close(self) -> None:
        pass


def generate_fixtures(seed: int = GOLDEN_SEED) -> dict[str, bytes]:
    def stream(n):
        return crypto.seeded_random(seed * 16 + n)

    kb = generate_keybox(stream(4))
    keys = stream(5)
    specs = [
        ContentKeySpec(keys(16), keys(16), int(ControlBits.ALLOW_CONTENT_DECRYPT
                                               | ControlBits.NONCE_REQUIRED), ttl=600),
        ContentKeySpec(keys(16), keys(16), int(ControlBits.ALLOW_GENERIC_SIGN
                                               | ControlBits.ALLOW_GENERIC_VERIFY
                                               | ControlBits.NONCE_REQUIRED)),
    ]
    ks = Keystore()
    ks.register_keybox(kb)
    for spec in specs:
        ks.add_content_key(spec)
    backend = Backend(ks, randbytes=stream(2), deterministic_keys=True)
    recorder = _Recorder(InProcessTransport(backend))
    cdm = Cdm(kb, clock=ScriptedClock(), randbytes=stream(0))
    client = CdmClient(cdm, recorder, kb, storage_key=storage_key_for(kb),
                       sig_scheme=crypto.SCHEME_PKCS1V15, randbytes=stream(1))

    sid = cdm.open_session()
    client.load_device_key(sid)
    client.acquire_license(sid, [s.key_id for s in specs])
    client.refresh(sid, specs[0].key_id, ttl=1200)
    cdm.close_session(sid)

    (prov_req, prov_resp), (lic_req, lic_resp), (ref_req, ref_resp) = recorder.frames
    return {
        "prov_req": prov_req,
        "prov_resp": prov_resp,
        "lic_req": lic_req,
        "lic_resp": lic_resp,
        "refresh_req": ref_req,
        "refresh_resp": ref_resp,
        "error": wire.error_frame("UnknownDevice", "device is not registered"),
    }


def write_fixtures(directory, seed: int = GOLDEN_SEED) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, frame in generate_fixtures(seed).items():
        path = directory / f"{name}.wvmsg"
        path.write_bytes(frame)
        written.append(path)
    return written


if __name__ == "__main__":
    for p in write_fixtures(sys.argv[1] if len(sys.argv) > 1 else "tests/golden"):
        print(p)
