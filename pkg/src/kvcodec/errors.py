"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each failure family gets its own
base class: bad caller input, corrupt bytes, and numerical breakdown.
"""


class KvCodecError(Exception):
    """Root of all library errors."""


class InvalidInput(KvCodecError, ValueError):
    pass


class DegenerateRow(InvalidInput):
    pass


class InstanceTooLarge(InvalidInput):
    pass


class ArtifactMismatch(InvalidInput):
    pass


class NothingToCompress(InvalidInput):
    pass


class NumericalFailure(KvCodecError, ArithmeticError):
    pass


class CorruptPayload(KvCodecError):
    pass


class BadMagic(CorruptPayload):
    pass


class UnsupportedVersion(CorruptPayload):
    pass


class ChecksumMismatch(CorruptPayload):
    pass


class TruncatedFile(CorruptPayload):
    pass
