"""Exception hierarchy shared across the package."""


class SparsimError(Exception):
    """Base class for all package errors."""


class MatrixFormatError(SparsimError):
    """Malformed matrix file. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(SparsimError):
    """Inconsistent or invalid configuration."""


class CapacityError(SparsimError):
    """A row or window cannot fit the available scratchpad budget."""


class HashOverflowError(SparsimError):
    """Quadratic probing exhausted the table without finding a slot."""


class LoweringError(SparsimError):
    """Instruction lowering failed (e.g. tag layout overflow)."""


class TraceError(SparsimError):
    """Trace file is malformed, truncated, or has a version mismatch."""


class MemoryFaultError(SparsimError):
    """An instruction referenced an unmapped simulated address."""


class SimulationError(SparsimError):
    """The simulation reached an invalid state."""


class DeadlockError(SimulationError):
    """No component made progress for the configured watchdog window."""


class VerificationError(SparsimError):
    """A computed result diverged from its oracle."""
