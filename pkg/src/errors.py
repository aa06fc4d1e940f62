"""
Exception hierarchy shared by every module.
"""


class SparseDSTError(Exception):
    """Base class for all errors raised by this package"""


# Dataset
class DatasetError(SparseDSTError):
    pass


class IdxFormatError(DatasetError):
    pass


class BadMagic(IdxFormatError):
    pass


class Truncated(IdxFormatError):
    pass


class DimensionOverflow(IdxFormatError):
    pass


class MissingFile(DatasetError):
    pass


class UnknownDataset(DatasetError):
    pass


class SplitSizeMismatch(DatasetError):
    pass


class DownloadFailed(DatasetError):
    pass


class ChecksumMismatch(DatasetError):
    pass


# Network
class NetworkError(SparseDSTError):
    pass


class ZeroFanIn(NetworkError):
    pass


class InvalidDensity(NetworkError):
    pass


class ShapeMismatch(NetworkError):
    pass


class DuplicateEdge(NetworkError):
    pass


class EdgeOutOfRange(NetworkError):
    pass


class SnapshotFormatError(NetworkError):
    pass


# Topology
class TopologyError(SparseDSTError):
    pass


class EmptyLayer(TopologyError):
    pass


class CandidateIsEdge(TopologyError):
    pass


class NotEnoughNonEdges(TopologyError):
    pass


class UntrainedNetwork(TopologyError):
    pass


# Trainer
class ConfigInvalid(SparseDSTError):
    pass


# Robustness
class PerturbationError(SparseDSTError):
    pass


class InvalidIntensity(PerturbationError):
    pass


class DegenerateRange(PerturbationError):
    pass


# Analysis
class AnalysisError(SparseDSTError):
    pass


class EmptyNetwork(AnalysisError):
    pass


class GridMismatch(AnalysisError):
    pass


class ReportError(AnalysisError):
    pass
