"""Task-based parallel runtime with sequential task-flow semantics.

One thread inserts tasks with declared data accesses; the runtime derives all
dependencies so parallel execution produces exactly the state sequential
execution in insertion order would.  On top of that core: pluggable
schedulers, simulated accelerator staging, speculative execution over
maybe-write accesses, communication tasks between runtime instances, and
dot/SVG export of graphs and traces.
"""

from .access import (
    ArrayAccessor,
    atomic_write,
    atomic_write_array,
    commutative_write,
    commutative_write_array,
    maybe_write,
    maybe_write_array,
    read,
    read_array,
    write,
    write_array,
)
from .cell import Cell
from .comms import InProcessUniverse
from .engine import (
    ComputeEngine,
    WorkerTeam,
    attach_graph,
    create_engine,
    migrate_workers,
)
from .errors import (
    CommProtocolError,
    ConfigurationError,
    DuplicateAccessError,
    EngineFailedError,
    InternalConsistencyError,
    RegistrationError,
    SeqflowError,
    SerializationError,
    SpeculationError,
    StagingError,
    TaskDisabledError,
    TaskFailedError,
)
from .graph import TaskGraph
from .scheduler import (
    DEVICE,
    HOST,
    FifoScheduler,
    PriorityScheduler,
    Scheduler,
    WorkerKind,
)
from .trace import generate_dot, generate_trace_svg

__version__ = "0.1.0"

__all__ = [
    "ArrayAccessor",
    "Cell",
    "CommProtocolError",
    "ComputeEngine",
    "ConfigurationError",
    "DEVICE",
    "DuplicateAccessError",
    "EngineFailedError",
    "FifoScheduler",
    "HOST",
    "InProcessUniverse",
    "InternalConsistencyError",
    "PriorityScheduler",
    "RegistrationError",
    "Scheduler",
    "SeqflowError",
    "SerializationError",
    "SpeculationError",
    "StagingError",
    "TaskDisabledError",
    "TaskFailedError",
    "TaskGraph",
    "WorkerKind",
    "WorkerTeam",
    "atomic_write",
    "atomic_write_array",
    "attach_graph",
    "commutative_write",
    "commutative_write_array",
    "create_engine",
    "generate_dot",
    "generate_trace_svg",
    "maybe_write",
    "maybe_write_array",
    "migrate_workers",
    "read",
    "read_array",
    "write",
    "write_array",
]
