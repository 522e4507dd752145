"""Live execution state and the resume machinery.

Each call of a rewritten entry function opens an :class:`Activation`: one
shared :class:`NamespaceTable` holding every redirected variable, plus
bookkeeping for crash handling. Cells read and write the table instead of
local variables, which is what lets a crashed run be inspected and resumed
in place: the state outlives the broken stack frames.

This module also owns resume synthesis: given a cell and a restart location
it builds a one-shot function containing the unfinished remainder of that
cell, compiled with the same crash barriers as the original so nested
crashes re-enter the protocol.
"""

from __future__ import annotations

import ast
import copy
import itertools
import linecache
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .errors import IllegalRestart, StaleActivationError, UnboundRead
from .sourcemodel import StatementPath

RESERVED_PREFIX = "__isr"


# ------------------------------------------------------------- name table


class NamespaceTable(dict):
    """Shared variable store for one activation.

    Plain dict reads and writes, so cell code pays one subscript per access.
    A read of a never-written name raises :class:`UnboundRead`, a NameError
    subclass: ``exec``/``eval`` running with the table as locals then fall
    back to globals exactly like ordinary name resolution.
    """

    def __init__(self, activation_id: str = "", *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.activation_id = activation_id

    def __missing__(self, key):
        raise UnboundRead(key)


class _StaleTable(dict):
    """What a NamespaceTable becomes after clean(). Every access raises."""

    def _refuse(self, *a, **k):
        raise StaleActivationError(
            f"activation {getattr(self, 'activation_id', '?')} is finished; "
            "its namespace table can no longer be used"
        )

    __getitem__ = __setitem__ = __delitem__ = _refuse
    __contains__ = __iter__ = __len__ = _refuse
    get = pop = popitem = setdefault = update = _refuse
    keys = values = items = clear = copy = _refuse

    def __repr__(self):
        return f"<stale namespace table {getattr(self, 'activation_id', '?')}>"


# ------------------------------------------------------ control indicators


class _Signal:
    """Identity-compared marker for a break or continue crossing a cell."""

    __slots__ = ("kind",)
    value = None

    def __init__(self, kind: str):
        self.kind = kind

    def __repr__(self):
        return f"<indicator {self.kind}>"


BREAK = _Signal("BREAK")
CONTINUE = _Signal("CONTINUE")
NORMAL = _Signal("NORMAL")


class Return:
    """A return crossing cell boundaries, carrying the returned value."""

    __slots__ = ("value",)
    kind = "RETURN"

    def __init__(self, value):
        self.value = value

    def __repr__(self):
        return f"<indicator RETURN {self.value!r}>"


def normalize(raw) -> object:
    """Cells signal normal completion by falling through to None."""
    return NORMAL if raw is None else raw


def indicator_kind(raw) -> str:
    return "NORMAL" if raw is None else getattr(raw, "kind", "NORMAL")


def walrus(frame: dict, name: str, value):
    """Assignment-expression helper: ``(x := v)`` against a redirected scope."""
    frame[name] = value
    return value


# ------------------------------------------------------------ cell records


@dataclass
class CellCode:
    """Everything the runtime needs to know about one generated cell."""

    cell_id: str
    origin: StatementPath            # owning statement in the entry function
    block_kind: str                  # kind of the block this cell's body came from
    kind: str                        # plain | loop-wrapper | funcdef-wrapper
    params: tuple[str, ...]
    scope_depth: int                 # 0 = entry scope; >0 = inside nested defs
    frame_scopes: tuple = ()         # names bound by each enclosing scope, 0..depth
    gen_def: ast.FunctionDef = field(repr=False, default=None)
    orig_body: list = field(repr=False, default_factory=list)
    filename: str = ""
    source: str = field(repr=False, default="")
    line_entries: list = field(repr=False, default_factory=list)
    children: list[str] = field(default_factory=list)
    parent: str | None = None

    def abs_path(self, within: StatementPath) -> StatementPath:
        return StatementPath(self.origin.steps + within.steps)


@dataclass
class FileRecord:
    """Maps a generated filename back to its program, cell, and statements."""

    program: Any
    cell_id: str
    unit: str                        # cell | resume | entry
    line_entries: list               # (start, end, depth, within-cell path)

    def path_for_line(self, lineno: int) -> StatementPath | None:
        best = None
        best_rank = (-1, -1)
        for start, end, depth, path in self.line_entries:
            if start <= lineno <= end and (depth, start) > best_rank:
                best, best_rank = path, (depth, start)
        return best


_file_registry: dict[str, FileRecord] = {}
_programs: dict[str, Any] = {}
_resume_counter = itertools.count(1)
_act_counter = itertools.count(1)


def register_program(program) -> None:
    _programs[program.id] = program


def get_program(program_id: str):
    return _programs.get(program_id)


def register_file(filename: str, record: FileRecord, source: str) -> None:
    _file_registry[filename] = record
    linecache.cache[filename] = (len(source), None, source.splitlines(True), filename)


def file_record(filename: str) -> FileRecord | None:
    return _file_registry.get(filename)


# -------------------------------------------------------------- activation


class Activation:
    """One live run of a vaccinated entry function."""

    def __init__(self, program, table: NamespaceTable, act_id: str):
        self.program = program
        self.table = table
        self.id = act_id
        self.status = "running"       # running | crashed | recovering | finished
        self.source_gen = program.generation
        self.retry_counts: dict = {}
        self.pending_session = None
        self.last_fix = None
        self.started_at = time.monotonic()
        self.thread_ident = threading.get_ident()
        self.crash_count = 0

    @property
    def cells(self) -> dict[str, Callable]:
        return self.program.cells

    def recover(self, cell_id: str, args: tuple, exc: BaseException):
        from .recovery import handle_crash

        return handle_crash(self, cell_id, args, exc)

    def finish(self) -> None:
        if self.status != "finished":
            self.status = "finished"
            clean(self.table)

    def __repr__(self):
        return f"<activation {self.id} {self.status}>"


def register(program, arguments: dict[str, Any]) -> Activation:
    """Open an activation: new table seeded with the entry's arguments."""
    act_id = f"{program.id}.a{next(_act_counter)}"
    table = NamespaceTable(act_id)
    table.update(arguments)
    act = Activation(program, table, act_id)
    program.activations[act_id] = act
    return act


def resolve(name: str, table: NamespaceTable):
    return table[name]


def assign(name: str, value, table: NamespaceTable) -> None:
    table[name] = value


def bind(table: NamespaceTable, values: dict[str, Any]) -> None:
    table.update(values)


def clean(table: NamespaceTable) -> None:
    """Mark the table stale. Reads and writes raise from now on."""
    if isinstance(table, NamespaceTable):
        table.__class__ = _StaleTable


# -------------------------------------------------------- resume synthesis


class ResumeUnwind(Exception):
    """Raised to pop frames until the barrier owning ``target_cell`` is hit.

    It subclasses Exception deliberately: crash barriers catch it, check
    whether they own the target, and either resume or re-raise.
    """

    def __init__(self, target_cell: str, restart: StatementPath, origin_event=None):
        super().__init__(f"unwinding to {target_cell} @ {restart}")
        self.target_cell = target_cell
        self.restart = restart
        self.origin_event = origin_event


def _copy_block(stmts: Iterable[ast.stmt]) -> list[ast.stmt]:
    return [copy.deepcopy(s) for s in stmts]


def _origin_index(stmt: ast.stmt, depth: int):
    """Original position of ``stmt`` at nesting level ``depth``, if it has one."""
    origin = getattr(stmt, "_isr_origin", None)
    if origin is None or len(origin.steps) <= depth:
        return None
    return origin.steps[depth][1]


def _suffix_block(stmts: list, steps: list, depth: int) -> list:
    """Remainder of a generated block from the statement at ``steps[0]``.

    Rewriting may split one original statement into several (a def plus its
    namespace export, say) or wrap statements in bookkeeping try blocks, so
    positions are matched through each statement's recorded origin rather
    than by raw index. Origin-less wrappers are searched transparently.
    """
    if not steps:
        return _copy_block(stmts)
    kind, idx = steps[0]
    rest = steps[1:]
    for i, s in enumerate(stmts):
        here = _origin_index(s, depth)
        if here is None:
            if isinstance(s, ast.Try):
                inner = _suffix_block(s.body, steps, depth)
                if inner is not None:
                    wrapper = ast.Try(
                        body=inner or [ast.Pass()],
                        handlers=_copy_block(s.handlers),
                        orelse=_copy_block(s.orelse),
                        finalbody=_copy_block(s.finalbody),
                    )
                    return [wrapper] + _copy_block(stmts[i + 1:])
            continue
        if here < idx:
            continue
        if here > idx or not rest:
            # past a dropped statement, or the restart statement itself:
            # everything from here onward re-executes
            return _copy_block(stmts[i:])
        inner = _suffix_into(s, rest, depth + 1)
        return inner + _copy_block(stmts[i + 1:])
    return None


def _suffix_into(stmt: ast.stmt, steps: list, depth: int) -> list:
    kind, idx = steps[0]
    if isinstance(stmt, (ast.For, ast.AsyncFor, ast.While)):
        if kind == "loop-body":
            raise IllegalRestart(
                "restart inside a loop body would skip the loop's back edge"
            )
        if kind == "branch-else":
            # the loop finished; only its else clause is unfinished
            return _suffix_block(stmt.orelse, steps, depth) or []
        raise IllegalRestart(f"cannot resume into {kind} of a loop")
    if isinstance(stmt, ast.If):
        if kind == "branch-then":
            return _suffix_block(stmt.body, steps, depth) or []
        if kind == "branch-else":
            return _suffix_block(stmt.orelse, steps, depth) or []
        raise IllegalRestart(f"cannot resume into {kind} of an if")
    if isinstance(stmt, (ast.With, ast.AsyncWith)):
        # the context manager exited during the unwind; run the whole
        # statement again rather than re-entering a closed context
        return [copy.deepcopy(stmt)]
    if isinstance(stmt, ast.Try):
        return _suffix_try(stmt, steps, depth)
    raise IllegalRestart(f"cannot resume into a {type(stmt).__name__}")


def _suffix_try(stmt: ast.Try, steps: list, depth: int) -> list:
    kind, idx = steps[0]
    if kind == "body":
        out = ast.Try(
            body=_suffix_block(stmt.body, steps, depth) or [ast.Pass()],
            handlers=_copy_block(stmt.handlers),
            orelse=_copy_block(stmt.orelse),
            finalbody=_copy_block(stmt.finalbody),
        )
        return [out]
    if kind == "handler":
        if idx >= len(stmt.handlers):
            raise IllegalRestart("no such handler")
        # the exception object is gone; the rest of the handler runs bare,
        # still covered by the original finally if there was one
        sfx = _suffix_block(stmt.handlers[idx].body, steps[1:], depth + 1)
        return _shield(sfx or [], stmt.finalbody)
    if kind == "branch-else":
        sfx = _suffix_block(stmt.orelse, steps, depth)
        return _shield(sfx or [], stmt.finalbody)
    if kind == "final":
        # resuming inside finally: finish it and keep going; whatever was
        # propagating through it was handled by the recovery session
        return _suffix_block(stmt.finalbody, steps, depth) or []
    raise IllegalRestart(f"cannot resume into {kind} of a try")


def _shield(body: list, finalbody: list) -> list:
    if not finalbody:
        return body
    return [ast.Try(body=body or [ast.Pass()], handlers=[],
                    orelse=[], finalbody=_copy_block(finalbody))]


def transfer_origins(src: ast.AST, dst: ast.AST) -> None:
    """Copy `_isr_origin` markers between structurally identical trees."""
    for a, b in zip(ast.walk(src), ast.walk(dst)):
        origin = getattr(a, "_isr_origin", None)
        if origin is not None:
            b._isr_origin = origin


def collect_line_entries(fn: ast.FunctionDef) -> list:
    entries = []

    def visit(stmts, depth):
        for s in stmts:
            origin = getattr(s, "_isr_origin", None)
            if origin is not None:
                entries.append((s.lineno, s.end_lineno, depth, origin))
            for child in ast.iter_child_nodes(s):
                if isinstance(child, ast.stmt):
                    visit([child], depth + 1)
                elif isinstance(child, (ast.ExceptHandler,)):
                    visit(child.body, depth + 1)
                elif hasattr(child, "body") and isinstance(getattr(child, "body"), list):
                    visit(child.body, depth + 1)

    visit(fn.body, 0)
    return entries


def materialize(
    fn_def: ast.FunctionDef,
    filename: str,
    globals_ns: dict,
    program,
    cell_id: str,
    unit: str,
) -> tuple[Callable, str, list]:
    """Unparse, compile, and register one generated function.

    Returns the callable, its source text, and its line map. The function is
    exec'd against the caller's real globals so user names keep resolving
    live, then popped so no generated name leaks into the module.
    """
    module = ast.Module(body=[fn_def], type_ignores=[])
    ast.fix_missing_locations(module)
    text = ast.unparse(module)
    reparsed = ast.parse(text)
    transfer_origins(fn_def, reparsed.body[0])
    entries = collect_line_entries(reparsed.body[0])
    code = compile(text, filename, "exec")
    exec(code, globals_ns)
    fn = globals_ns.pop(fn_def.name)
    register_file(filename, FileRecord(program, cell_id, unit, entries), text)
    return fn, text, entries


def synthesize_unfinished(program, cell: CellCode, restart: StatementPath) -> Callable:
    """Build the one-shot remainder of ``cell`` starting at ``restart``.

    ``restart`` is in the cell's own coordinates (first step kind matches
    ``cell.block_kind``). The result takes the same parameters as the cell.
    """
    key = (cell.cell_id, restart, program.generation)
    cached = program.resume_cache.get(key)
    if cached is not None:
        return cached
    steps = list(restart.steps)
    if not steps:
        steps = [(cell.block_kind, 0)]
    # origins on generated statements are absolute: the component naming a
    # position inside this cell's block sits at index len(cell.origin.steps)
    body = _suffix_block(cell.gen_def.body, steps, len(cell.origin.steps))
    if not body:
        body = [ast.Pass()]
    n = next(_resume_counter)
    name = f"__isr_resume_{n}__"
    fn_def = ast.FunctionDef(
        name=name,
        args=copy.deepcopy(cell.gen_def.args),
        body=body,
        decorator_list=[],
        returns=None,
    )
    filename = f"<isr:{program.id}:{cell.cell_id}:resume{n}>"
    fn, _text, _entries = materialize(
        fn_def, filename, program.globals_ns, program, cell.cell_id, "resume"
    )
    program.resume_cache[key] = fn
    return fn


def resume(activation, cell: CellCode, restart: StatementPath, args: tuple):
    """Run the unfinished remainder of ``cell`` and hand back its indicator."""
    fn = synthesize_unfinished(activation.program, cell, restart)
    activation.status = "running"
    return fn(*args)
