"""Exception hierarchy shared by every layer.

Each class carries the CLI exit code it maps to, and the class name doubles
as the error tag carried over the wire.
"""

from __future__ import annotations


class ExpdError(Exception):
    exit_code = 1


class ValidationError(ExpdError):
    exit_code = 2


class EmptyCommand(ValidationError):
    pass


class DuplicateEnvName(ValidationError):
    pass


class InvalidEnvName(ValidationError):
    pass


class MountTargetConflict(ValidationError):
    pass


class MissingAccelType(ValidationError):
    pass


class InvalidHardware(ValidationError):
    pass


class InvalidKey(ValidationError):
    pass


class DuplicatePath(ValidationError):
    pass


class PayloadTooLarge(ValidationError):
    pass


class IllegalTransition(ExpdError):
    exit_code = 2


class NotFound(ExpdError):
    exit_code = 3


class SnapshotNotFound(NotFound):
    pass


class ParentNotFound(NotFound):
    pass


class MissingBlob(NotFound):
    pass


class UnknownTask(NotFound):
    pass


class UnknownExecutor(NotFound):
    pass


class UnknownChannel(NotFound):
    pass


class WrongExecutor(ExpdError):
    exit_code = 2


class AlreadyTerminal(ExpdError):
    exit_code = 2


class TaskTerminal(ExpdError):
    exit_code = 2


class ChannelExists(ExpdError):
    exit_code = 2


class NotAttached(ExpdError):
    exit_code = 2


class AlreadyAttached(ExpdError):
    exit_code = 2


class BufferOverflow(ExpdError):
    exit_code = 1


class InvalidAck(ExpdError):
    exit_code = 2


class StorageFailure(ExpdError):
    exit_code = 1


class NotADirectory(ExpdError):
    exit_code = 2


class UnsupportedFileType(ExpdError):
    exit_code = 2


class DestinationNotEmpty(ExpdError):
    exit_code = 2


class SetupFailed(ExpdError):
    def __init__(self, exit_code_: int, message: str = "") -> None:
        super().__init__(message or f"setup command exited with {exit_code_}")
        self.setup_exit_code = exit_code_


class CorruptState(ExpdError):
    exit_code = 1


class ProtocolError(ExpdError):
    """Malformed traffic; the connection is closed."""

    exit_code = 4


class FrameTooLarge(ProtocolError):
    pass


class TruncatedStream(ProtocolError):
    pass


class TransportError(ExpdError):
    exit_code = 4


class CoordinatorUnreachable(TransportError):
    pass


class PortInUse(ExpdError):
    exit_code = 4


def _all_subclasses(cls: type) -> list[type]:
    out = []
    for sub in cls.__subclasses__():
        out.append(sub)
        out.extend(_all_subclasses(sub))
    return out


ERROR_CLASSES: dict[str, type[ExpdError]] = {
    c.__name__: c for c in [ExpdError, *_all_subclasses(ExpdError)]
}


def error_from_wire(name: str, message: str) -> ExpdError:
    cls = ERROR_CLASSES.get(name, ExpdError)
    if cls is SetupFailed:
        return ExpdError(message)
    return cls(message)
