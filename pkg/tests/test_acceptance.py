"""Acceptance criteria 1-9, one test each, each printing a PASS/FAIL line."""

import os
import random
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings

from conftest import write_setup
from support import (
    MEDIA_BITS,
    cenc_oracle,
    cmac_oracle,
    craft_license,
    craft_refresh,
    derive_oracle,
    flip_bit,
    key_state,
    make_world,
    rsa_session,
)
from test_wire import messages
from wvsim import cenc, crypto, wire
from wvsim.cdm import Cdm
from wvsim.clock import ScriptedClock
from wvsim.config import load_config
from wvsim.errors import (
    BadKcbMagic,
    BadServerMac,
    BadStorageMac,
    KeyExpired,
    MalformedFrame,
    RateLimited,
    StaleNonce,
    UsageDenied,
)
from wvsim.golden import FIXTURE_NAMES, generate_fixtures
from wvsim.harness import run_e2e
from wvsim.kcb import ControlBits, KeyControlBlock
from wvsim.keybox import (
    KEYBOX_SIZE,
    KeyboxStatus,
    generate_keybox,
    parse_keybox,
    storage_key_for,
    validate_keybox,
)
from wvsim.ladder import build_contexts, derive_keys
from wvsim.servers import Backend, Keystore
from wvsim.trace import Tracer

pytestmark = pytest.mark.acceptance

GOLDEN = Path(__file__).parent / "golden"

CALL_SEQUENCE = ["oecc09", "oecc14", "oecc12", "oecc13", "oecc18", "oecc19", "oecc14",
                 "oecc20", "oecc21", "oecc15", "oecc17", "oecc48", "oecc10"]

RFC4493_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
RFC4493_MSG = bytes.fromhex(
    "6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e51"
    "30c81c46a35ce411e5fbc1191a0a52eff69f2445df4f9b17ad2b417be66c3710"
)
RFC4493_VECTORS = [
    (0, "bb1d6929e95937287fa37d129b756746"),
    (16, "070a16b46b4d4144f79bdd9dd04a287c"),
    (40, "dfa66747de9ae63030ca32611497c827"),
    (64, "51f0bebf7e3b9d92fc49741779363cfe"),
]

USAGE = [
    (ControlBits.ALLOW_CONTENT_DECRYPT, "decrypt_cenc"),
    (ControlBits.ALLOW_GENERIC_ENCRYPT, "generic_encrypt"),
    (ControlBits.ALLOW_GENERIC_DECRYPT, "generic_decrypt"),
    (ControlBits.ALLOW_GENERIC_SIGN, "generic_sign"),
    (ControlBits.ALLOW_GENERIC_VERIFY, "generic_verify"),
]


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(number, label):
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"\nFAIL criterion {number}: {label}")
            raise
        with capsys.disabled():
            print(f"\nPASS criterion {number}: {label}")
    return run


def is_subsequence(needle, haystack):
    it = iter(haystack)
    return all(x in it for x in needle)


def provisioning_response(world, sid):
    nonce = world.cdm.generate_nonce(sid)
    world.cdm.generate_derived_keys(sid)
    req = wire.ProvisioningRequest(nonce=nonce, device_id=world.kb.device_id,
                                   provisioning_token=world.kb.provisioning_token)
    covered = wire.mac_input(req)
    return world.backend.handle_frame(covered + world.cdm.generate_signature(sid, covered))


def refresh_response(world, sid, key_id, ttl):
    req = wire.RefreshRequest(nonce=world.cdm.generate_nonce(sid),
                              request_id=world.client._request_ids[sid], key_id=key_id, ttl=ttl)
    covered = wire.mac_input(req)
    return world.backend.handle_frame(covered + world.cdm.generate_signature(sid, covered))


def random_bits(rng, frame, count=64):
    return rng.sample(range(len(frame) * 8), count)


def test_c1_end_to_end_ladder(criterion, tmp_path):
    with criterion(1, "1 MiB provision -> license -> decrypt, call sequence in trace"):
        cfg = load_config(write_setup(tmp_path / "run"))
        assert cfg.credential.exists() is False
        data = os.urandom(1 << 20)
        (tmp_path / "in.bin").write_bytes(data)
        result = run_e2e(cfg, tmp_path / "in.bin", tmp_path / "out.bin")
        assert result.provisioned
        assert (tmp_path / "out.bin").read_bytes() == data
        symbols = [line.split()[0] for line in result.trace]
        assert is_subsequence(CALL_SEQUENCE, symbols)
        assert all(line.split()[3] == "status=OK" for line in result.trace)


def test_c2_keybox_integrity(criterion):
    with criterion(2, "992 single-bit corruptions rejected, keybox is 128 bytes"):
        kb = generate_keybox(crypto.seeded_random(100))
        raw = kb.serialize()
        assert len(raw) == KEYBOX_SIZE == 128
        assert validate_keybox(kb) is KeyboxStatus.OK
        rejected = sum(validate_keybox(parse_keybox(flip_bit(raw, bit))) is not KeyboxStatus.OK
                       for bit in range(124 * 8))
        assert rejected == 992


def test_c3_derivation(criterion):
    with criterion(3, "CMAC vectors 4/4, 16+32+32 key set, client/server mirror on 100 pairs"):
        matched = sum(crypto.aes_cmac(RFC4493_KEY, RFC4493_MSG[:n]).hex() == tag
                      and cmac_oracle(RFC4493_KEY, RFC4493_MSG[:n]).hex() == tag
                      for n, tag in RFC4493_VECTORS)
        assert matched == 4

        rng = random.Random(3)
        for i in range(100):
            # keybox phase: the CDM session against the provisioning server
            kb = generate_keybox(crypto.seeded_random(1000 + i))
            ks = Keystore()
            ks.register_keybox(kb)
            server = Backend(ks).provisioning.derived_keys_for(kb.device_id)
            cdm = Cdm(kb, clock=ScriptedClock(0.0), tracer=Tracer())
            sid = cdm.open_session()
            cdm.generate_derived_keys(sid)
            client = cdm._sessions[sid].derived
            assert client == server
            assert (len(client.asset_key), len(client.mac_client_key), len(client.mac_server_key)) == (16, 32, 32)
            assert (client.asset_key, client.mac_client_key, client.mac_server_key) == \
                derive_oracle(kb.device_key, kb.provisioning_blob)

            # license phase: arbitrary parent key and blob
            parent, blob = rng.randbytes(16), rng.randbytes(rng.randrange(1, 200))
            ours = derive_keys(parent, build_contexts(blob))
            assert (ours.asset_key, ours.mac_client_key, ours.mac_server_key) == derive_oracle(parent, blob)


def test_c4_nonce_semantics(criterion):
    with criterion(4, "rate limit at 21, FIFO-16 eviction, replays rejected, shared nonce consumed once"):
        world = make_world(seed=11)
        sid = world.cdm.open_session()
        for _ in range(20):
            world.cdm.generate_nonce(sid)
            world.clock.advance(0.04)
        with pytest.raises(RateLimited):
            world.cdm.generate_nonce(sid)

        world.clock.advance(5)
        fifo = []
        for _ in range(17):
            fifo.append(world.cdm.generate_nonce(sid))
            world.clock.advance(0.1)
        assert fifo[0] not in world.cdm.nonces
        assert all(n in world.cdm.nonces for n in fifo[1:])
        world.clock.advance(5)

        prov_sid = world.cdm.open_session()
        storage = storage_key_for(world.kb)
        prov = provisioning_response(world, prov_sid)
        world.cdm.rewrap_device_rsa_key(prov_sid, prov, storage)
        with pytest.raises(StaleNonce):
            world.cdm.rewrap_device_rsa_key(prov_sid, prov, storage)

        lic_sid = rsa_session(world)
        response = world.backend.handle_frame(world.client.build_license_request(lic_sid, world.key_ids))
        world.client.process_license_response(lic_sid, response)
        with pytest.raises(StaleNonce):
            world.client.process_license_response(lic_sid, response)

        shared_sid = rsa_session(world)
        nonce = world.cdm.generate_nonce(shared_sid)
        other = world.cdm.generate_nonce(shared_sid)
        entries = [(os.urandom(16), os.urandom(16), KeyControlBlock(nonce, 0, MEDIA_BITS))
                   for _ in range(3)]
        crafted = craft_license(world, shared_sid, entries, nonce=nonce)
        assert world.cdm.load_keys(shared_sid, crafted.frame) == 3
        assert nonce not in world.cdm.nonces and other in world.cdm.nonces
        with pytest.raises(StaleNonce):
            world.cdm.load_keys(shared_sid, crafted.frame)


def test_c5_tamper_resistance(criterion):
    with criterion(5, "64 bit flips each in ProvResp/LicResp/RefreshResp -> MAC error, state unchanged"):
        world = make_world(seed=12)
        rng = random.Random(5)
        storage = storage_key_for(world.kb)

        sid = world.cdm.open_session()
        prov = provisioning_response(world, sid)
        before = key_state(world.cdm, sid)
        for bit in random_bits(rng, prov):
            with pytest.raises(BadServerMac):
                world.cdm.rewrap_device_rsa_key(sid, flip_bit(prov, bit), storage)
            assert key_state(world.cdm, sid) == before
        world.cdm.rewrap_device_rsa_key(sid, prov, storage)

        sid = rsa_session(world)
        lic = world.backend.handle_frame(world.client.build_license_request(sid, world.key_ids))
        world.cdm.derive_keys_from_session_key(sid, wire.decode(lic).enc_session_key,
                                               world.client.device_info.blob())
        before = key_state(world.cdm, sid)
        for bit in random_bits(rng, lic):
            with pytest.raises(BadServerMac):
                world.cdm.load_keys(sid, flip_bit(lic, bit))
            assert key_state(world.cdm, sid) == before
        assert world.cdm.load_keys(sid, lic) == 2

        refresh = refresh_response(world, sid, world.key_ids[0], ttl=900)
        before = key_state(world.cdm, sid)
        for bit in random_bits(rng, refresh):
            with pytest.raises(BadServerMac):
                world.cdm.refresh_keys(sid, flip_bit(refresh, bit))
            assert key_state(world.cdm, sid) == before
        world.cdm.refresh_keys(sid, refresh)
        assert world.cdm.query_key_control(sid, world.key_ids[0]).ttl == 900


def _usage_allowed(cdm, sid, op, key):
    iv = bytes(16)
    try:
        if op == "decrypt_cenc":
            cdm.decrypt_cenc(sid, [(0, 16, bytes(16))], iv)
        elif op == "generic_encrypt":
            cdm.generic_encrypt(sid, b"m", iv)
        elif op == "generic_decrypt":
            assert cdm.generic_decrypt(sid, crypto.aes_cbc_encrypt(key, iv, b"m"), iv) == b"m"
        elif op == "generic_sign":
            cdm.generic_sign(sid, b"m")
        else:
            assert cdm.generic_verify(sid, b"m", crypto.hmac_sha256(key, b"m"))
    except UsageDenied:
        return False
    return True


def test_c6_kcb_semantics(criterion):
    with criterion(6, "TTL expiry, refresh restores and changes only TTL, bad magic, 32 usage subsets"):
        world = make_world(seed=13)
        sid = rsa_session(world)
        nonce = world.cdm.generate_nonce(sid)
        kid, key = os.urandom(16), os.urandom(16)
        crafted = craft_license(world, sid, [(kid, key, KeyControlBlock(nonce, 10, MEDIA_BITS))], nonce=nonce)
        world.cdm.load_keys(sid, crafted.frame)
        world.cdm.select_key(sid, kid)
        plaintext = os.urandom(64)
        iv = os.urandom(16)
        subs = cenc.split(cenc_oracle(key, iv, cenc.split(plaintext, [(16, 48)])), [(16, 48)])
        assert world.cdm.decrypt_cenc(sid, subs, iv) == plaintext
        world.clock.advance(10.5)
        with pytest.raises(KeyExpired):
            world.cdm.decrypt_cenc(sid, subs, iv)

        entry_before = world.cdm._sessions[sid].key_table[kid]
        nonce = world.cdm.generate_nonce(sid)
        # the refresh KCB carries different bits; only its TTL may be applied
        frame = craft_refresh(crafted.derived, nonce, [(kid, key, KeyControlBlock(nonce, 300, 0x7F))])
        world.cdm.refresh_keys(sid, frame)
        entry_after = world.cdm._sessions[sid].key_table[kid]
        assert entry_after.kcb == entry_before.kcb.with_ttl(300)
        assert entry_after.key == entry_before.key
        assert world.cdm.decrypt_cenc(sid, subs, iv) == plaintext

        sid = rsa_session(world)
        nonce = world.cdm.generate_nonce(sid)
        bad = replace(KeyControlBlock(nonce, 0, MEDIA_BITS), magic=b"kc09")
        crafted = craft_license(world, sid, [(os.urandom(16), key, bad)], nonce=nonce)
        with pytest.raises(BadKcbMagic):
            world.cdm.load_keys(sid, crafted.frame)
        assert world.cdm._sessions[sid].key_table == {}

        cases = 0
        for subset in range(32):
            world.clock.advance(1.0)
            bits = int(ControlBits.NONCE_REQUIRED)
            for i, (bit, _) in enumerate(USAGE):
                if subset >> i & 1:
                    bits |= int(bit)
            sid = rsa_session(world)
            nonce = world.cdm.generate_nonce(sid)
            kid, key = os.urandom(16), os.urandom(16)
            world.cdm.load_keys(sid, craft_license(
                world, sid, [(kid, key, KeyControlBlock(nonce, 0, bits))], nonce=nonce).frame)
            world.cdm.select_key(sid, kid)
            for i, (_, op) in enumerate(USAGE):
                assert _usage_allowed(world.cdm, sid, op, key) == bool(subset >> i & 1), (subset, op)
            world.cdm.close_session(sid)
            cases += 1
        assert cases == 32


def test_c7_cenc_correctness(criterion):
    with criterion(7, "50 random subsample plans match CTR oracle, clear verbatim, block split"):
        world = make_world(seed=14)
        sid = world.licensed_session()
        world.cdm.select_key(sid, world.key_ids[0])
        key = world.specs[0].key
        rng = random.Random(7)
        for _ in range(50):
            plan = [(rng.randrange(100), rng.randrange(100)) for _ in range(rng.randrange(1, 9))]
            data = rng.randbytes(sum(c + p for c, p in plan))
            iv = rng.randbytes(16)
            enc = cenc_oracle(key, iv, cenc.split(data, plan))
            pos = 0
            for c, p in plan:
                assert enc[pos:pos + c] == data[pos:pos + c]
                pos += c + p
            assert world.cdm.decrypt_cenc(sid, cenc.split(enc, plan), iv) == data

        for first in (16, 32, 160):
            data = rng.randbytes(first + 48)
            iv = rng.randbytes(16)
            whole = world.cdm.decrypt_cenc(sid, [(0, len(data), data)], iv)
            parts = world.cdm.decrypt_cenc(sid, [(0, first, data[:first]), (0, 48, data[first:])], iv)
            assert whole == parts == cenc_oracle(key, iv, [(0, len(data), data)])


def test_c8_credential_lifecycle(criterion, tmp_path):
    with criterion(8, "rewrap/persist/load, wrong storage key, reuse, reprovision after delete"):
        world = make_world(seed=15, credential_path=tmp_path / "cert.bin")
        sid = world.cdm.open_session()
        assert world.client.load_device_key(sid) is True
        stored = (tmp_path / "cert.bin").read_bytes()
        fresh = world.cdm.open_session()
        world.cdm.load_device_rsa_key(fresh, stored, storage_key_for(world.kb))
        server_pub = world.keystore.device_certs[world.kb.device_id].public_numbers()
        assert world.cdm._sessions[fresh].rsa_key.public_key().public_numbers() == server_pub
        with pytest.raises(BadStorageMac):
            world.cdm.load_device_rsa_key(world.cdm.open_session(), stored, os.urandom(16))

        cfg = load_config(write_setup(tmp_path / "run"))
        (tmp_path / "in.bin").write_bytes(os.urandom(4096))
        runs = []
        for delete_first in (False, False, True):
            if delete_first:
                cfg.credential.unlink()
            result = run_e2e(cfg, tmp_path / "in.bin", tmp_path / "out.bin")
            runs.append((result.provisioned, "oecc18" in [line.split()[0] for line in result.trace]))
        assert runs == [(True, True), (False, False), (True, True)]


def test_c9_wire_canonicality(criterion):
    with criterion(9, "1000 random round-trips, every golden truncation fails, goldens byte-stable"):
        seen = []

        @settings(max_examples=1000, database=None, deadline=None,
                  suppress_health_check=list(HealthCheck))
        @given(messages)
        def roundtrip(msg):
            raw = wire.encode(msg)
            assert wire.decode(raw) == msg
            assert wire.encode(wire.decode(raw)) == raw
            seen.append(raw)

        roundtrip()
        assert len(seen) >= 1000

        regenerated = generate_fixtures()
        for name in FIXTURE_NAMES:
            raw = (GOLDEN / f"{name}.wvmsg").read_bytes()
            for n in range(len(raw)):
                with pytest.raises(MalformedFrame):
                    wire.decode(raw[:n])
            assert regenerated[name] == raw
        assert generate_fixtures() == regenerated
