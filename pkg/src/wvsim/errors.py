"""Exception hierarchy shared by every layer of the simulator.

The class name of each error doubles as the ``kind`` reported in trace lines
(``status=Error:<kind>``) and in error frames sent over the loopback transport.
"""


class WvSimError(Exception):
    """Base class for all simulator errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# keybox / primitives
class LengthError(WvSimError, ValueError):
    pass


class EntropyError(WvSimError):
    pass


class EmptyBlob(WvSimError, ValueError):
    pass


class KeyLengthError(WvSimError, ValueError):
    pass


# protocol errors raised by the CDM or the servers
class ProtocolError(WvSimError):
    """Any failure of the key ladder protocol (CLI exit code 2)."""


class IntegrityError(ProtocolError):
    pass


class BadPadding(ProtocolError):
    pass


class TooManySessions(ProtocolError):
    pass


class UnknownSession(ProtocolError):
    pass


class RateLimited(ProtocolError):
    pass


class NoDerivedKeys(ProtocolError):
    pass


class NoKeybox(ProtocolError):
    pass


class StaleNonce(ProtocolError):
    pass


class MacError(ProtocolError):
    """HMAC tag mismatch on any authenticated message or blob."""


class BadServerMac(MacError):
    pass


class BadClientMac(MacError):
    pass


class BadStorageMac(MacError):
    pass


class MalformedKey(ProtocolError):
    pass


class NoRsaKey(ProtocolError):
    pass


class OaepError(ProtocolError):
    pass


class BadSignature(ProtocolError):
    pass


class BadKcbMagic(ProtocolError):
    pass


class UnknownKeyId(ProtocolError):
    pass


class NoKeySelected(ProtocolError):
    pass


class KeyExpired(ProtocolError):
    pass


class UsageDenied(ProtocolError):
    pass


class Unsupported(ProtocolError):
    pass


class UnknownDevice(ProtocolError):
    pass


# wire codec
class MalformedFrame(ProtocolError):
    pass


class UnknownMsgType(MalformedFrame):
    pass


class RemoteError(ProtocolError):
    """The peer answered with an error frame; ``remote_kind`` names its error."""

    def __init__(self, remote_kind: str, detail: str = ""):
        super().__init__(f"{remote_kind}: {detail}" if detail else remote_kind)
        self.remote_kind = remote_kind


# harness
class ConfigError(WvSimError):
    pass


class BindError(WvSimError, OSError):
    pass
