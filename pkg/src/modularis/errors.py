"""Exception hierarchy shared by every layer of the engine."""


class ModularisError(Exception):
    """Base class for all engine errors."""


# type system / plan validation
class TypeMismatch(ModularisError):
    def __init__(self, message, node_id=None, expected=None, actual=None):
        detail = message
        if node_id is not None:
            detail = f"node {node_id}: {detail}"
        if expected is not None or actual is not None:
            detail = f"{detail} (expected {expected}, got {actual})"
        super().__init__(detail)
        self.node_id = node_id
        self.expected = expected
        self.actual = actual


class FieldCollision(TypeMismatch):
    pass


class UnknownField(TypeMismatch):
    pass


class TypeParseError(TypeMismatch):
    pass


class PlanError(ModularisError):
    pass


class CycleDetected(PlanError):
    pass


class ArityMismatch(PlanError):
    pass


class UnreachableNode(PlanError):
    pass


class SpecInvalid(PlanError):
    pass


class SharedAttrViolation(SpecInvalid):
    pass


# runtime
class ExecutionError(ModularisError):
    pass


class UnboundParameter(ExecutionError):
    pass


class InnerCardinality(ExecutionError):
    pass


class ParamCardinality(ExecutionError):
    pass


class LengthMismatch(ExecutionError):
    pass


class BucketOutOfRange(ExecutionError):
    pass


class NotACollection(ExecutionError):
    pass


class AllocationFailure(ExecutionError):
    pass


class HistogramMismatch(ExecutionError):
    pass


class KeyOutOfDomain(ExecutionError):
    pass


class CompressionIllegal(ModularisError):
    pass


# transport
class TransportError(ExecutionError):
    pass


class CollectiveMismatch(TransportError):
    pass


class Deadlock(TransportError):
    pass


class EpochViolation(TransportError):
    pass


class RegionViolation(TransportError):
    pass


class WorkerAborted(TransportError):
    """Raised in a rank whose peers aborted the collective it was waiting in."""


class WorkerPanic(ExecutionError):
    def __init__(self, rank, cause):
        super().__init__(f"rank {rank} failed: {type(cause).__name__}: {cause}")
        self.rank = rank
        self.cause = cause


class ValueOutOfDomain(KeyOutOfDomain):
    pass
