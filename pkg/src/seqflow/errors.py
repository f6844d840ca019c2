"""Exception types raised by the runtime."""


class SeqflowError(Exception):
    """Base class for all runtime errors."""


class RegistrationError(SeqflowError):
    """Misuse of the handle registry (duplicate live registration, bad unregister)."""


class ConfigurationError(SeqflowError):
    """Graph or engine used in an unsupported configuration."""


class DuplicateAccessError(SeqflowError):
    """A task declared the same data object (or array element) twice."""


class InternalConsistencyError(SeqflowError):
    """The runtime detected a broken internal invariant (e.g. double release)."""


class TaskDisabledError(SeqflowError):
    """The task's speculative branch was cancelled; it has no value."""


class TaskFailedError(SeqflowError):
    """A task body raised; the engine is poisoned."""


class EngineFailedError(SeqflowError):
    """The compute engine was poisoned by a failing task."""


class StagingError(SeqflowError):
    """Device staging could not be satisfied (object larger than arena, all blocks pinned)."""


class SerializationError(SeqflowError):
    """An object does not resolve to a serialization tier, or its stream is malformed."""


class CommProtocolError(SeqflowError):
    """Wire protocol violation (oversized message, broadcast sequence divergence)."""


class SpeculationError(SeqflowError):
    """Unsupported combination involving speculative execution."""
