"""Exception hierarchy shared by every component.

Errors cross the wire by class name, so each subclass must be registered in
``ERRORS`` (done automatically by ``__init_subclass__``).
"""

ERRORS: dict[str, type["WossError"]] = {}


class WossError(Exception):
    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        ERRORS[cls.__name__] = cls


# hints / protocol
class MalformedHintValue(WossError, ValueError):
    pass


class FrameTooLarge(WossError):
    pass


class VersionMismatch(WossError):
    pass


class TruncatedFrame(WossError):
    pass


# metadata manager
class FileExists(WossError):
    pass


class UnknownFile(WossError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class FileStateError(WossError):
    pass


class NoCapacity(WossError):
    pass


class UnknownAllocation(WossError):
    pass


class ReadOnlyAttribute(WossError):
    pass


class UnknownAttribute(WossError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# storage nodes
class OutOfSpace(WossError):
    pass


class ChecksumMismatch(WossError):
    pass


class ChunkNotFound(WossError):
    pass


class NodeUnavailable(WossError):
    """The target node is dead or unreachable."""


class ReplicationDegraded(WossError):
    def __init__(self, message="", replicas=None, failed=None):
        super().__init__(message)
        self.replicas = list(replicas or [])
        self.failed = list(failed or [])


class ChainBroken(ReplicationDegraded):
    def __init__(self, message="", replicas=None, failed=None, hop=None):
        super().__init__(message, replicas, failed)
        self.hop = hop


# client
class ReadRangeError(WossError, ValueError):
    pass


class AllReplicasUnreachable(WossError):
    pass


# workflow engine
class ConflictingAnnotations(WossError):
    pass


class NoIdleNode(WossError):
    pass


class TaskFailed(WossError):
    pass


class DagError(WossError, ValueError):
    pass


class RemoteError(WossError):
    """Server-side failure with no matching local exception class."""


def error_from_wire(name: str, message: str) -> WossError:
    cls = ERRORS.get(name, RemoteError)
    if cls is RemoteError:
        return RemoteError(f"{name}: {message}")
    return cls(message)
