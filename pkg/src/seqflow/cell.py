"""A mutable single-value holder that plugs into every runtime protocol.

Cells carry an int, float, or bool.  They implement duplication (for
speculative snapshots), the three-method device-movement protocol, and are
the reference trivially-copyable type for communication.
"""

from __future__ import annotations

import struct

_FORMATS = {bool: "<?", int: "<q", float: "<d"}


def format_for(value) -> str:
    # bool first: it is an int subclass
    for py_type, fmt in _FORMATS.items():
        if type(value) is py_type:
            return fmt
    raise TypeError(f"Cell holds int, float, or bool, not {type(value).__name__}")


class Cell:
    __slots__ = ("value",)

    def __init__(self, value=0):
        format_for(value)  # validate
        self.value = value

    def __repr__(self):
        return f"Cell({self.value!r})"

    def __eq__(self, other):
        if isinstance(other, Cell):
            return self.value == other.value and type(self.value) is type(other.value)
        return NotImplemented

    def __hash__(self):
        return hash((type(self.value), self.value))

    # -- duplication (speculation) ------------------------------------------

    def duplicate(self) -> "Cell":
        return Cell(self.value)

    def assign_from(self, other: "Cell") -> None:
        self.value = other.value

    # -- device movement -----------------------------------------------------

    def device_needed_size(self) -> int:
        return struct.calcsize(format_for(self.value))

    def move_to_device(self, mover, block) -> str:
        fmt = format_for(self.value)
        mover.copy_host_to_device(block, struct.pack(fmt, self.value))
        return fmt  # the descriptor a kernel needs to reinterpret the bytes

    def move_from_device(self, mover, block, descriptor) -> None:
        data = mover.copy_device_to_host(block)
        (self.value,) = struct.unpack_from(descriptor, data)
        if descriptor == "<?":
            self.value = bool(self.value)
