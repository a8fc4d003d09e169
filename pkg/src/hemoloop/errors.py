"""Exception types shared across the service."""


class HemoloopError(Exception):
    """Base class for all errors raised by this package."""


# --- file format / volume assembly ---

class DicomError(HemoloopError):
    pass


class MissingMagic(DicomError):
    pass


class MissingTag(DicomError):
    def __init__(self, tag: tuple, name: str = ""):
        self.tag = tag
        self.name = name
        super().__init__(f"missing mandatory tag {format_tag(tag)} {name}".rstrip())


class UnsupportedTransferSyntax(DicomError):
    pass


class PixelCountMismatch(DicomError):
    pass


class MixedSeries(HemoloopError):
    pass


class NonUniformSpacing(HemoloopError):
    pass


class EmptyInput(HemoloopError):
    pass


class ShapeMismatch(HemoloopError):
    pass


# --- registry ---

class RegistryError(HemoloopError):
    pass


class UnknownCase(RegistryError):
    pass


class UnknownPartition(RegistryError):
    pass


class UnknownVersion(RegistryError):
    pass


class OverlapViolation(RegistryError):
    pass


class FrozenPartition(RegistryError):
    pass


class NoHoldoutMetrics(RegistryError):
    pass


class LabelAlreadySet(RegistryError):
    pass


class ImmutableRecord(RegistryError):
    pass


# --- ingest / API ---

class ProtocolViolation(HemoloopError):
    pass


class BadFilter(HemoloopError):
    pass


class NotFound(HemoloopError):
    pass


class InferencePending(HemoloopError):
    pass


# --- model / inference ---

class NoPositiveVoxels(HemoloopError):
    pass


class RunnerCrash(HemoloopError):
    pass


class RunnerTimeout(HemoloopError):
    pass


class BadWeights(HemoloopError):
    pass


class EmptyComponent(HemoloopError):
    pass


class NotReady(HemoloopError):
    pass


# --- metrics ---

class OneClassOnly(HemoloopError):
    pass


class UnsupportedFormat(HemoloopError):
    pass


# --- rounds ---

class NoCandidates(HemoloopError):
    pass


class LeakageDetected(HemoloopError):
    pass


def format_tag(tag: tuple) -> str:
    group, elem = tag
    return f"({group:04X},{elem:04X})"
