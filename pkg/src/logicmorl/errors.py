"""Exception types raised across the package."""


class LogicMorlError(Exception):
    """Base class for all package errors."""


class LexError(LogicMorlError, ValueError):
    """Unknown token in a specification string."""


class ParseError(LogicMorlError, ValueError):
    """Specification string does not conform to the grammar."""


class ObjectiveIndexError(LogicMorlError, IndexError):
    """An atom references an objective the environment does not have."""


class ConfigError(LogicMorlError, ValueError):
    pass


class EpisodeOver(LogicMorlError, RuntimeError):
    """step() called on a state whose step counter already reached the horizon."""


class DegenerateSpec(LogicMorlError, ValueError):
    """Oracle and random returns coincide, so no normalized score exists."""


class ShapeError(LogicMorlError, ValueError):
    pass


class EmptySequence(LogicMorlError, ValueError):
    pass


class NoTape(LogicMorlError, RuntimeError):
    """backward() called on a value that was not produced by a recorded forward pass."""


class BufferTooSmall(LogicMorlError, RuntimeError):
    pass


class CheckpointError(LogicMorlError, RuntimeError):
    pass


class EmptyCurriculum(LogicMorlError, ValueError):
    pass


class GenerationStall(LogicMorlError, RuntimeError):
    """Could not reach the requested number of distinct specifications."""


class NumericFailure(LogicMorlError, FloatingPointError):
    """A loss or parameter became NaN or infinite."""
