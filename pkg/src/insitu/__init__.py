"""Crash interception, live update, and in-place resume for Python programs.

The package rewrites an entry function so that every loop body runs behind a
crash barrier. When an exception escapes user code the run is held open
instead of torn down: an operator (interactive console, scripted fix, remote
session, or coordinator) inspects live state, optionally patches code or
data, and execution resumes from the crash site with everything computed so
far intact.
"""

from .errors import (
    ActionError,
    BridgeProtocolError,
    CommandSourceExhausted,
    ConsoleWriteError,
    EmptyDiff,
    FunctionNotFound,
    IllegalRestart,
    InsituError,
    ParseError,
    RecoveryAbort,
    RetryBudgetExceeded,
    ShadowingError,
    SignatureMismatch,
    StaleActivationError,
    StructureChangeError,
    UnboundRead,
    VaccinationError,
)
from .sourcemodel import (
    CodeDiff,
    DiffEdit,
    SourceFunction,
    StatementPath,
    diff_functions,
    first_modified_location,
    parse_function,
)
from .vaccinate import RecoveryOptions, vaccinate
from .recovery import (
    CommandSource,
    CrashEvent,
    FixProcedure,
    QueueSource,
    RecoveryCommand,
    ScriptSource,
    recovery_source,
    replay,
)

__version__ = "0.1.0"

__all__ = [
    "ActionError",
    "BridgeProtocolError",
    "CodeDiff",
    "CommandSource",
    "CommandSourceExhausted",
    "ConsoleWriteError",
    "CrashEvent",
    "DiffEdit",
    "EmptyDiff",
    "FixProcedure",
    "FunctionNotFound",
    "IllegalRestart",
    "InsituError",
    "ParseError",
    "QueueSource",
    "RecoveryAbort",
    "RecoveryCommand",
    "RecoveryOptions",
    "RetryBudgetExceeded",
    "ScriptSource",
    "ShadowingError",
    "SignatureMismatch",
    "SourceFunction",
    "StaleActivationError",
    "StatementPath",
    "StructureChangeError",
    "UnboundRead",
    "VaccinationError",
    "diff_functions",
    "first_modified_location",
    "parse_function",
    "recovery_source",
    "replay",
    "vaccinate",
]
