"""Symmetric and RSA primitives pinned for the whole simulator.

AES-128-CBC with PKCS#7 padding protects keys and generic data, AES-128-CTR
covers media, HMAC-SHA256 produces every tag, and the device RSA key uses
OAEP-SHA1 for session keys and PSS-SHA1 or PKCS#1 v1.5 for request signatures.

The RSA operations that consume randomness (OAEP encryption, PSS signing, key
generation) take an explicit ``randbytes`` source so that deterministic test
mode can reproduce fixtures byte for byte. Their inverses (OAEP decryption,
signature verification) are delegated to ``cryptography``.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
from math import gcd
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, padding, serialization
from cryptography.hazmat.primitives.asymmetric import padding as asym_padding
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.cmac import CMAC

from .errors import BadPadding, KeyLengthError, MalformedKey, OaepError

RandomSource = Callable[[int], bytes]

AES_BLOCK = 16
RSA_BITS = 2048
RSA_EXPONENT = 65537
PSS_SALT_LEN = 20  # SHA-1 digest length

SCHEME_PSS = 1
SCHEME_PKCS1V15 = 2


def system_random(n: int) -> bytes:
    return os.urandom(n)


def seeded_random(seed: int) -> RandomSource:
    """Reproducible byte source for deterministic test mode. Not for real keys."""
    return random.Random(seed).randbytes


def _check_aes_key(key: bytes) -> None:
    if len(key) != 16:
        raise KeyLengthError(f"AES-128 key must be 16 bytes, got {len(key)}")


def aes_cbc_encrypt(key: bytes, iv: bytes, plaintext: bytes) -> bytes:
    _check_aes_key(key)
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    return enc.update(padded) + enc.finalize()


def aes_cbc_decrypt(key: bytes, iv: bytes, ciphertext: bytes) -> bytes:
    _check_aes_key(key)
    if not ciphertext or len(ciphertext) % AES_BLOCK:
        raise BadPadding(f"ciphertext length {len(ciphertext)} is not a positive multiple of 16")
    dec = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    padded = dec.update(ciphertext) + dec.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise BadPadding("invalid PKCS#7 padding") from exc


def aes_ctr(key: bytes, iv: bytes, data: bytes) -> bytes:
    """AES-128-CTR keystream XOR; the full 16-byte IV is the initial counter block."""
    _check_aes_key(key)
    ctx = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    return ctx.update(data) + ctx.finalize()


def aes_cmac(key: bytes, message: bytes) -> bytes:
    _check_aes_key(key)
    c = CMAC(algorithms.AES(key))
    c.update(message)
    return c.finalize()


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    return hmac.new(key, message, hashlib.sha256).digest()


def tags_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


# --- RSA -------------------------------------------------------------------

def generate_rsa_key(randbytes: RandomSource | None = None) -> rsa.RSAPrivateKey:
    """2048-bit RSA key, e=65537.

    With no ``randbytes`` the key comes from ``cryptography``'s generator; with a
    source, primes are drawn from it so the same seed yields the same key.
    """
    if randbytes is None:
        return rsa.generate_private_key(public_exponent=RSA_EXPONENT, key_size=RSA_BITS)

    from sympy import nextprime

    half = RSA_BITS // 2

    def prime() -> int:
        while True:
            cand = int.from_bytes(randbytes(half // 8), "big") | (3 << (half - 2)) | 1
            p = nextprime(cand)
            if p.bit_length() == half and gcd(p - 1, RSA_EXPONENT) == 1:
                return p

    p = prime()
    q = prime()
    while q == p:
        q = prime()
    n = p * q
    d = pow(RSA_EXPONENT, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(RSA_EXPONENT, n),
    )
    return numbers.private_key()


def rsa_to_pkcs8(key: rsa.RSAPrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.DER,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def rsa_from_pkcs8(der: bytes) -> rsa.RSAPrivateKey:
    try:
        key = serialization.load_der_private_key(der, password=None)
    except (ValueError, TypeError) as exc:
        raise MalformedKey("not a PKCS#8 private key") from exc
    if not isinstance(key, rsa.RSAPrivateKey):
        raise MalformedKey("PKCS#8 key is not RSA")
    if key.key_size != RSA_BITS:
        raise MalformedKey(f"expected {RSA_BITS}-bit RSA key, got {key.key_size}")
    return key


def public_to_der(key: rsa.RSAPublicKey) -> bytes:
    return key.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def public_from_der(der: bytes) -> rsa.RSAPublicKey:
    key = serialization.load_der_public_key(der)
    if not isinstance(key, rsa.RSAPublicKey):
        raise MalformedKey("public key is not RSA")
    return key


def _mgf1_sha1(seed: bytes, length: int) -> bytes:
    out = b""
    counter = 0
    while len(out) < length:
        out += hashlib.sha1(seed + counter.to_bytes(4, "big")).digest()
        counter += 1
    return out[:length]


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def _rsa_private_op(key: rsa.RSAPrivateKey, m: int) -> int:
    priv = key.private_numbers()
    # CRT
    s1 = pow(m, priv.dmp1, priv.p)
    s2 = pow(m, priv.dmq1, priv.q)
    h = (priv.iqmp * (s1 - s2)) % priv.p
    return s2 + h * priv.q


def rsa_oaep_encrypt(public_key: rsa.RSAPublicKey, message: bytes,
                     randbytes: RandomSource = system_random) -> bytes:
    """RSAES-OAEP with SHA-1 and MGF1-SHA1, empty label."""
    pub = public_key.public_numbers()
    k = (pub.n.bit_length() + 7) // 8
    h_len = 20
    if len(message) > k - 2 * h_len - 2:
        raise ValueError("message too long for OAEP")
    l_hash = hashlib.sha1(b"").digest()
    ps = b"\x00" * (k - len(message) - 2 * h_len - 2)
    db = l_hash + ps + b"\x01" + message
    seed = randbytes(h_len)
    masked_db = _xor(db, _mgf1_sha1(seed, k - h_len - 1))
    masked_seed = _xor(seed, _mgf1_sha1(masked_db, h_len))
    em = b"\x00" + masked_seed + masked_db
    c = pow(int.from_bytes(em, "big"), pub.e, pub.n)
    return c.to_bytes(k, "big")


def rsa_oaep_decrypt(private_key: rsa.RSAPrivateKey, ciphertext: bytes) -> bytes:
    try:
        return private_key.decrypt(
            ciphertext,
            asym_padding.OAEP(
                mgf=asym_padding.MGF1(hashes.SHA1()), algorithm=hashes.SHA1(), label=None
            ),
        )
    except ValueError as exc:
        raise OaepError("OAEP decryption failed") from exc


def _emsa_pss_encode(message: bytes, em_bits: int, salt: bytes) -> bytes:
    h_len = 20
    em_len = (em_bits + 7) // 8
    m_hash = hashlib.sha1(message).digest()
    h = hashlib.sha1(b"\x00" * 8 + m_hash + salt).digest()
    ps = b"\x00" * (em_len - len(salt) - h_len - 2)
    db = ps + b"\x01" + salt
    masked_db = bytearray(_xor(db, _mgf1_sha1(h, em_len - h_len - 1)))
    masked_db[0] &= 0xFF >> (8 * em_len - em_bits)
    return bytes(masked_db) + h + b"\xbc"


def rsa_sign(private_key: rsa.RSAPrivateKey, message: bytes, scheme: int = SCHEME_PSS,
             randbytes: RandomSource = system_random) -> bytes:
    if scheme == SCHEME_PKCS1V15:
        return private_key.sign(message, asym_padding.PKCS1v15(), hashes.SHA1())
    if scheme != SCHEME_PSS:
        raise ValueError(f"unknown signature scheme {scheme}")
    n = private_key.private_numbers().public_numbers.n
    mod_bits = n.bit_length()
    em = _emsa_pss_encode(message, mod_bits - 1, randbytes(PSS_SALT_LEN))
    s = _rsa_private_op(private_key, int.from_bytes(em, "big"))
    return s.to_bytes((mod_bits + 7) // 8, "big")


def rsa_verify(public_key: rsa.RSAPublicKey, signature: bytes, message: bytes,
               scheme: int = SCHEME_PSS) -> bool:
    if scheme == SCHEME_PSS:
        pad = asym_padding.PSS(mgf=asym_padding.MGF1(hashes.SHA1()), salt_length=PSS_SALT_LEN)
    elif scheme == SCHEME_PKCS1V15:
        pad = asym_padding.PKCS1v15()
    else:
        return False
    try:
        public_key.verify(signature, message, pad, hashes.SHA1())
    except InvalidSignature:
        return False
    return True
