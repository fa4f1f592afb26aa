"""Exception hierarchy shared by every pipeline stage."""


class MapError(Exception):
    """Base class for data errors (console exit code 2)."""


class SolverError(MapError):
    """Base class for optimizer failures (console exit code 3)."""


class MalformedLog(MapError):
    pass


class DescriptorLengthMismatch(MapError):
    pass


class NonMonotonicTimestamps(MapError):
    pass


class UnsupportedVersion(MapError):
    pass


class CorruptBlob(MapError):
    pass


class IoFailure(MapError):
    pass


class EmptyMission(MapError):
    pass


class InvalidKeptSet(MapError):
    pass


class DanglingBacklink(MapError):
    pass


class InsufficientSample(MapError):
    pass


class DegenerateSample(InsufficientSample):
    pass


class LengthMismatch(MapError):
    pass


class EmptyInput(MapError):
    pass


class IndexNotBuilt(MapError):
    pass


class InsufficientCorrespondences(MapError):
    pass


class NoConsensus(MapError):
    pass


class DegenerateConfiguration(MapError):
    pass


class BehindCamera(MapError):
    pass


class CountMismatch(MapError):
    pass


class InvalidConfig(MapError):
    pass


class DisconnectedGraph(SolverError):
    pass


class SolverDiverged(SolverError):
    pass


class NoResiduals(SolverError):
    pass


class MapLocked(MapError):
    pass
