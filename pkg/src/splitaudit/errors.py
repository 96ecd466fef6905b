"""Exception types shared across the package."""


class SplitAuditError(Exception):
    """Base class for all errors raised by splitaudit."""


class InvalidConfig(SplitAuditError, ValueError):
    pass


class DimensionMismatch(SplitAuditError, ValueError):
    pass


class MalformedFile(SplitAuditError):
    pass


class ShapeMismatch(SplitAuditError, ValueError):
    pass


class CryptoError(SplitAuditError):
    pass


class UnsupportedProfile(CryptoError):
    pass


class SlotOverflow(CryptoError):
    pass


class KeyMismatch(CryptoError):
    pass


class SlotLengthMismatch(CryptoError):
    pass


class DepthExhausted(CryptoError):
    pass


class IndivisibleLength(SplitAuditError, ValueError):
    pass


class PacketError(SplitAuditError):
    """Base for auditor packet decoding failures."""


class MalformedLine(PacketError):
    pass


class CountMismatch(PacketError):
    pass


class ArithmeticViolation(PacketError):
    pass


class FrameError(SplitAuditError):
    """Malformed or unexpected inferencer/cloud protocol frame."""


class HandshakeMismatch(FrameError):
    pass


class SessionFailed(SplitAuditError):
    """An inference session aborted; no prediction is produced."""


class UnknownClass(SplitAuditError, ValueError):
    pass


class SourceExhausted(SplitAuditError):
    pass


class CloudUnavailable(SessionFailed):
    """The Computing Cloud could not be reached; the window is dropped."""
