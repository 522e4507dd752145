"""Exception types shared across the package.

Hierarchy notes that matter at runtime:

* ``UnboundRead`` subclasses ``UnboundLocalError`` so user handlers written
  against the original program's unbound reads keep catching them.
* ``RecoveryAbort`` subclasses ``BaseException`` so it escapes the crash
  barriers, which only catch ``Exception``.
"""

from __future__ import annotations


class InsituError(Exception):
    """Base class for errors raised by this package."""


class ParseError(InsituError):
    """Source text could not be parsed, or the target is not supported."""


class FunctionNotFound(InsituError, LookupError):
    """No function with the requested name exists in the given source."""


class EmptyDiff(InsituError):
    """A structural diff was empty where an edit was required."""


class VaccinationError(InsituError):
    """The function cannot be rewritten (unsupported construct, etc.)."""


class ShadowingError(VaccinationError):
    """User code collides with a reserved runtime identifier."""


class UnboundRead(InsituError, UnboundLocalError):
    """A variable was read before any assignment wrote it.

    Subclassing UnboundLocalError keeps user handlers working: an
    ``except NameError`` that caught the original program's unbound read
    catches the table-mediated one too.
    """

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"variable {self.name!r} read before assignment"


class StaleActivationError(InsituError):
    """A namespace table was used after its activation was cleaned."""


class IllegalRestart(InsituError):
    """The requested restart location cannot be resumed from."""


class StructureChangeError(InsituError):
    """Replacement code restructured a region that is live on the stack."""


class SignatureMismatch(InsituError):
    """Replacement code changed the entry function's signature."""


class ActionError(InsituError):
    """An action command raised while executing against the live state."""


class ConsoleWriteError(InsituError):
    """A console ``eval`` attempted to mutate program state."""


class RetryBudgetExceeded(InsituError):
    """The same crash signature recurred more times than allowed."""


class CommandSourceExhausted(InsituError):
    """A command source ran out of commands before a resume was triggered."""


class BridgeProtocolError(InsituError):
    """A malformed or out-of-order frame arrived on the session bridge."""


class RecoveryAbort(BaseException):
    """Operator chose to abandon recovery; unwinds past every barrier."""

    def __init__(self, event=None):
        super().__init__("recovery abandoned")
        self.event = event
