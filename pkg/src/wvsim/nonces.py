"""Nonce table: FIFO of 16 live 32-bit nonces, at most 20 generated per second."""

from __future__ import annotations

from collections import deque

from .errors import RateLimited

NONCE_CAPACITY = 16
NONCE_RATE_LIMIT = 20
RATE_WINDOW = 1.0


class NonceTable:
    def __init__(self, randbytes, clock, capacity: int = NONCE_CAPACITY,
                 rate_limit: int = NONCE_RATE_LIMIT):
        self._randbytes = randbytes
        self._clock = clock
        self.capacity = capacity
        self.rate_limit = rate_limit
        self._queue: deque[int] = deque()
        self._issued: deque[float] = deque()

    def generate(self) -> int:
        now = self._clock.now()
        while self._issued and self._issued[0] <= now - RATE_WINDOW:
            self._issued.popleft()
        if len(self._issued) >= self.rate_limit:
            raise RateLimited(f"more than {self.rate_limit} nonces within {RATE_WINDOW}s")
        nonce = int.from_bytes(self._randbytes(4), "big")
        while nonce in self._queue:
            nonce = int.from_bytes(self._randbytes(4), "big")
        if len(self._queue) >= self.capacity:
            self._queue.popleft()
        self._queue.append(nonce)
        self._issued.append(now)
        return nonce

    def __contains__(self, nonce: int) -> bool:
        return nonce in self._queue

    def __len__(self) -> int:
        return len(self._queue)

    def live(self) -> list[int]:
        return list(self._queue)

    def consume(self, nonce: int) -> None:
        self._queue.remove(nonce)
