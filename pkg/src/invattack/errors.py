"""Exception hierarchy shared across the toolkit.

Every error the library raises on bad input or violated preconditions derives
from InvattackError so the CLI can map any library failure to one exit code.
"""


class InvattackError(Exception):
    """Base class for all toolkit errors."""


# --- dataset I/O ---

class MalformedHeader(InvattackError):
    """IDX byte stream does not start with the expected magic/header."""


class TruncatedPayload(InvattackError):
    """IDX byte stream ends before the payload announced by its header."""


class DimensionMismatch(InvattackError):
    """Images with inconsistent shapes where a uniform shape is required."""


class TooFewExamples(InvattackError):
    """A per-category computation needs more examples than the dataset has."""


# --- geometry ---

class EmptyGrid(InvattackError):
    """A transform grid enumerates to zero points."""


class ShapeMismatch(InvattackError):
    """Two rasters that must share a shape do not."""


# --- clustering ---

class EmptyMask(InvattackError):
    """A changed-pixel mask contains no set pixels."""


class ConvergenceFailure(InvattackError):
    """Iterative eigensolver hit its sweep cap before reaching tolerance."""


# --- attacks ---

class NoDonorAvailable(InvattackError):
    """No dataset example has an admissible label for the requested attack."""


# --- synthetic task / training ---

class InvalidParams(InvattackError):
    """Parameter values outside their documented domain."""


class DivergenceDetected(InvattackError):
    """Training loss became non-finite."""


class EmptyInput(InvattackError):
    """An aggregate over an empty collection was requested."""


# --- annotation service ---

class UnknownImage(InvattackError):
    """Dataset index out of range."""


class BudgetExceeded(InvattackError):
    """An edit batch would push a session outside its norm budget."""


class StaleSession(InvattackError):
    """Session id unknown, or the client acted on an outdated revision."""


class DuplicateVote(InvattackError):
    """A rater already voted on this item."""


class UnknownItem(InvattackError):
    """Item id not part of the task."""


class NoVotes(InvattackError):
    """Success computation requires at least one vote per item."""


class CorruptLog(InvattackError):
    """Persisted event log replays into an invalid state."""
