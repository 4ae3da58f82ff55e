"""Exception hierarchy shared across the package.

CLI exit codes: ConfigError -> 1, I/O and format errors -> 2, NumericError -> 3.
"""


class PolyGanError(Exception):
    pass


class ShapeError(PolyGanError):
    """Operand shapes violate an operation's contract."""


class SpecError(PolyGanError):
    """An architecture spec violates its invariants."""


class DomainError(PolyGanError):
    """A parameter value is outside its documented bounds."""


class NumericError(PolyGanError):
    """A non-finite value appeared where the contract requires finite ones."""


class ConfigError(PolyGanError):
    """Invalid or unknown configuration input."""


class CheckpointFormatError(PolyGanError):
    """Checkpoint magic/version mismatch."""


class CheckpointCorruptionError(PolyGanError):
    """Checkpoint file is truncated or internally inconsistent."""


class DecodeError(PolyGanError):
    """Unsupported or malformed image file."""


class PairingError(PolyGanError):
    """Evaluation directories do not contain matching file pairs."""
