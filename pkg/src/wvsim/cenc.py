"""CENC subsample handling shared by the CDM (decrypt) and the content packager (encrypt).

A sample is a list of subsamples ``(clear_len, protected_len, data)``. All
protected ranges of one sample form a single AES-128-CTR stream: the counter
keeps running across subsample boundaries, including mid-block.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

from .crypto import aes_ctr


class Subsample(NamedTuple):
    clear_len: int
    protected_len: int
    data: bytes


def uniform_plan(total: int, clear: int, protected: int) -> list[tuple[int, int]]:
    """Repeat (clear, protected) to cover ``total`` bytes, trimming the last pair."""
    if clear < 0 or protected < 0 or clear + protected == 0:
        raise ValueError("subsample pattern must cover at least one byte")
    plan = []
    left = total
    while left > 0:
        c = min(clear, left)
        p = min(protected, left - c)
        plan.append((c, p))
        left -= c + p
    return plan


def split(data: bytes, plan: Sequence[tuple[int, int]]) -> list[Subsample]:
    if sum(c + p for c, p in plan) != len(data):
        raise ValueError("subsample plan does not cover the sample exactly")
    out, pos = [], 0
    for c, p in plan:
        out.append(Subsample(c, p, data[pos:pos + c + p]))
        pos += c + p
    return out


def transform(key: bytes, iv: bytes, subsamples: Sequence[Subsample]) -> bytes:
    """Apply the CTR keystream to the protected ranges; works both directions."""
    if len(iv) != 16:
        raise ValueError("CENC IV must be 16 bytes")
    protected = bytearray()
    for s in subsamples:
        if len(s.data) != s.clear_len + s.protected_len:
            raise ValueError("subsample data length does not match its header")
        protected += s.data[s.clear_len:]
    stream = aes_ctr(key, iv, bytes(protected))
    out, pos = bytearray(), 0
    for s in subsamples:
        out += s.data[:s.clear_len]
        out += stream[pos:pos + s.protected_len]
        pos += s.protected_len
    return bytes(out)
