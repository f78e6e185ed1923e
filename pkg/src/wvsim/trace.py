"""WideXtractor-style call traces, one line per CDM call, named by oecc symbol.

    oecc15 LoadKeys session=00000001 status=OK in=5756...(1200B) out=00000003
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from typing import IO, Iterable

HEX_PREFIX_BYTES = 64

OECC_NAMES = {
    1: "Initialize",
    2: "Terminate",
    3: "InstallKeybox",
    4: "GetKeyData",
    5: "IsKeyboxValid",
    6: "GetRandom",
    7: "GetDeviceID",
    8: "WrapKeybox",
    9: "OpenSession",
    10: "CloseSession",
    11: "DecryptCTR",
    12: "GenerateDerivedKeys",
    13: "GenerateSignature",
    14: "GenerateNonce",
    15: "LoadKeys",
    16: "RefreshKeys",
    17: "SelectKey",
    18: "RewrapDeviceRSAKey",
    19: "LoadDeviceRSAKey",
    20: "GenerateRSASignature",
    21: "DeriveKeysFromSessionKey",
    22: "APIVersion",
    23: "GetSecurityLevel",
    24: "Generic_Encrypt",
    25: "Generic_Decrypt",
    26: "Generic_Sign",
    27: "Generic_Verify",
    28: "GetHDCPCapability",
    29: "SupportsUsageTable",
    30: "UpdateUsageTable",
    31: "DeactivateUsageEntry",
    32: "ReportUsage",
    33: "DeleteUsageEntry",
    34: "DeleteUsageTable",
    35: "LoadKeys",
    36: "GenerateRSASignature",
    37: "GetMaxNumberOfSessions",
    38: "GetNumberofOpenSessions",
    39: "isAntiRollbackHwPresent",
    40: "CopyBuffer",
    41: "QueryKeyControl",
    42: "LoadTestKeybox",
    43: "ForceDeleteUsageEntry",
    44: "GetHDCPCapability",
    45: "LoadTestRSAKey",
    46: "Security_Patch_Level",
    47: "LoadKeys",
    48: "DecryptCENC",
}

_LINE = re.compile(
    r"^oecc(?P<num>\d\d) (?P<name>\S+) session=(?P<session>\S+) "
    r"status=(?P<status>\S+) in=(?P<inp>\S+) out=(?P<out>\S+)$"
)


def symbol(num: int) -> str:
    return f"oecc{num:02d}"


def hex_prefix(value) -> str:
    """Render a traced value; byte strings past 64 bytes are cut with a length note."""
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "01" if value else "00"
    if isinstance(value, int):
        return f"{value:08x}"
    if isinstance(value, str):
        value = value.encode()
    value = bytes(value)
    if not value:
        return "-"
    if len(value) <= HEX_PREFIX_BYTES:
        return value.hex()
    return f"{value[:HEX_PREFIX_BYTES].hex()}...({len(value)}B)"


@dataclass(frozen=True)
class TraceRecord:
    num: int
    name: str
    session: str
    status: str
    inp: str
    out: str

    @property
    def symbol(self) -> str:
        return symbol(self.num)

    @property
    def ok(self) -> bool:
        return self.status == "OK"

    def format(self) -> str:
        return (f"{self.symbol} {self.name} session={self.session} status={self.status} "
                f"in={self.inp} out={self.out}")


def parse_line(line: str) -> TraceRecord:
    m = _LINE.match(line.strip())
    if not m:
        raise ValueError(f"not a trace line: {line!r}")
    return TraceRecord(int(m["num"]), m["name"], m["session"], m["status"], m["inp"], m["out"])


def read_trace(lines: Iterable[str]) -> list[TraceRecord]:
    return [parse_line(line) for line in lines if line.strip()]


class Tracer:
    """Collects trace records in call order, optionally mirroring them to a stream."""

    def __init__(self, stream: IO[str] | None = None):
        self.records: list[TraceRecord] = []
        self._stream = stream
        self._lock = threading.Lock()

    def emit(self, num: int, session, status: str, inp, out) -> TraceRecord:
        rec = TraceRecord(
            num=num,
            name=OECC_NAMES[num],
            session="-" if session is None else f"{session:08x}",
            status=status,
            inp=hex_prefix(inp),
            out=hex_prefix(out),
        )
        with self._lock:
            self.records.append(rec)
            if self._stream is not None:
                self._stream.write(rec.format() + "\n")
                self._stream.flush()
        return rec

    def symbols(self) -> list[str]:
        return [r.symbol for r in self.records]

    def lines(self) -> list[str]:
        return [r.format() for r in self.records]
