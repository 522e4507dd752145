"""Crash interception and the recovery command protocol.

When an exception escapes a cell, the barrier that called it hands control
here. The crash becomes a :class:`CrashEvent`; a command source (script,
interactive console, remote session, or coordinator client) then issues
commands against the held-open run:

* ``pass``     resume at the crash statement, changing nothing
* ``action``   execute a statement against the live variables, stay open
* ``surgery``  replace the entry function's source, resume at the first
               modified statement when it precedes the crash
* ``abort``    tear the run down

A resumed run continues inside the same activation: everything computed
before the crash stays computed.
"""

from __future__ import annotations

import ast
import json
import os
import sys
import threading
import time
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from . import context
from .context import CellCode, ResumeUnwind
from .errors import (
    ActionError,
    CommandSourceExhausted,
    IllegalRestart,
    RecoveryAbort,
    RetryBudgetExceeded,
    SignatureMismatch,
    StructureChangeError,
)
from .sourcemodel import (
    StatementPath,
    diff_functions,
    first_modified_location,
    order_index,
    parse_function,
)


# -------------------------------------------------------------- data model


@dataclass(frozen=True)
class RestartLocation:
    cell_id: str
    path: StatementPath              # relative to the cell's body
    abs_path: StatementPath          # in entry-function coordinates


@dataclass
class LiveFrame:
    cell_id: str
    abs_path: StatementPath | None
    lineno: int
    filename: str
    statement: str = ""
    unit: str = "cell"


@dataclass
class CrashEvent:
    program_id: str
    activation_id: str
    exception_kind: str
    message: str
    crash_location: RestartLocation
    cell_frames: list[LiveFrame]     # innermost first
    variable_preview: dict[str, str]
    traceback_text: str
    timestamp: float
    generation: int
    # runtime-only references (not serialized)
    activation: Any = field(default=None, repr=False)
    exception: BaseException = field(default=None, repr=False)
    caught_cell: str = ""
    caught_args: tuple = field(default=(), repr=False)

    @property
    def signature(self) -> tuple:
        return (self.exception_kind, self.crash_location.cell_id,
                tuple(self.crash_location.path.steps))

    def to_json(self) -> dict:
        return {
            "program": self.program_id,
            "activation": self.activation_id,
            "exception": self.exception_kind,
            "message": self.message,
            "cell": self.crash_location.cell_id,
            "path": self.crash_location.path.to_json(),
            "frames": [
                {"cell": f.cell_id, "line": f.lineno, "unit": f.unit,
                 "statement": f.statement}
                for f in self.cell_frames
            ],
            "variables": self.variable_preview,
            "traceback": self.traceback_text,
            "generation": self.generation,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class RecoveryCommand:
    kind: str                        # pass | action | surgery | abort
    payload: str | None = None

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.payload is not None:
            out["inline_payload"] = self.payload
        return out


@dataclass
class FixProcedure:
    """An ordered, replayable recovery recipe for one crash signature.

    ``exception_kind``/``cell_id``/``path`` may each be None, which matches
    anything; recorded procedures always carry the full signature.
    """

    commands: list[RecoveryCommand] = field(default_factory=list)
    exception_kind: str | None = None
    cell_id: str | None = None
    path: StatementPath | None = None

    def matches(self, event: CrashEvent) -> bool:
        if self.exception_kind is not None and self.exception_kind != event.exception_kind:
            return False
        if self.cell_id is not None and self.cell_id != event.crash_location.cell_id:
            return False
        if self.path is not None and self.path != event.crash_location.path:
            return False
        return True

    def to_json(self) -> dict:
        sig: dict = {}
        if self.exception_kind is not None:
            sig["exception"] = self.exception_kind
        if self.cell_id is not None:
            sig["cell"] = self.cell_id
        if self.path is not None:
            sig["path"] = self.path.to_json()
        return {
            "version": 1,
            "signature": sig,
            "commands": [c.to_json() for c in self.commands],
        }

    @classmethod
    def from_json(cls, data: dict, base_dir: Path | None = None) -> "FixProcedure":
        if data.get("version") != 1:
            raise ValueError(f"unsupported fix script version: {data.get('version')!r}")
        commands = []
        for raw in data.get("commands", []):
            payload = raw.get("inline_payload")
            if payload is None and "payload_path" in raw:
                p = Path(raw["payload_path"])
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                payload = p.read_text()
            commands.append(RecoveryCommand(raw["kind"], payload))
        sig = data.get("signature", {})
        path = sig.get("path")
        return cls(
            commands=commands,
            exception_kind=sig.get("exception"),
            cell_id=sig.get("cell"),
            path=StatementPath.from_json(path) if path is not None else None,
        )

    @classmethod
    def load(cls, path: str | Path) -> "FixProcedure":
        p = Path(path)
        return cls.from_json(json.loads(p.read_text()), base_dir=p.parent)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def record(command: RecoveryCommand, procedure: FixProcedure) -> None:
    procedure.commands.append(command)


# ---------------------------------------------------------- command sources


class CommandSource:
    """Where a recovery session gets its commands from."""

    def begin(self, event: CrashEvent) -> None:
        pass

    def next_command(self, event: CrashEvent) -> RecoveryCommand | None:
        raise NotImplementedError

    def report(self, event: CrashEvent, command: RecoveryCommand,
               ok: bool, detail: str) -> None:
        pass

    def end(self, event: CrashEvent, resumed: bool) -> None:
        pass


class ScriptSource(CommandSource):
    """Replays pre-written procedures; each is consumed at most once."""

    def __init__(self, procedures: Iterable[FixProcedure]):
        self.procedures = list(procedures)
        self._active: list[RecoveryCommand] = []

    def begin(self, event: CrashEvent) -> None:
        self._active = []
        for i, proc in enumerate(self.procedures):
            if proc is not None and proc.matches(event):
                self._active = list(proc.commands)
                self.procedures[i] = None  # consumed
                return

    def next_command(self, event: CrashEvent) -> RecoveryCommand | None:
        if self._active:
            return self._active.pop(0)
        return None


class QueueSource(CommandSource):
    """Thread-fed source: another thread pushes commands into the session."""

    def __init__(self, timeout: float | None = None):
        import queue

        self._q: "queue.Queue[RecoveryCommand | None]" = queue.Queue()
        self.timeout = timeout
        self.finished = threading.Event()
        self.resumed = False
        self.reports: list[tuple[RecoveryCommand, bool, str]] = []
        self.event: CrashEvent | None = None

    def begin(self, event: CrashEvent) -> None:
        # a source may serve several crashes in sequence; re-arm per session
        self.event = event
        self.resumed = False
        self.finished.clear()

    def push(self, command: RecoveryCommand) -> None:
        self._q.put(command)

    def close(self) -> None:
        self._q.put(None)

    def next_command(self, event: CrashEvent) -> RecoveryCommand | None:
        import queue

        try:
            return self._q.get(timeout=self.timeout)
        except queue.Empty:
            return None

    def report(self, event, command, ok, detail) -> None:
        self.reports.append((command, ok, detail))

    def end(self, event, resumed) -> None:
        self.resumed = resumed
        self.finished.set()


_tls = threading.local()


@contextmanager
def recovery_source(source: CommandSource | FixProcedure | list):
    """Force a command source for crashes on this thread (tests, harnesses)."""
    if isinstance(source, FixProcedure):
        source = ScriptSource([source])
    elif isinstance(source, (list, tuple)):
        source = ScriptSource(list(source))
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    stack.append(source)
    try:
        yield source
    finally:
        stack.pop()


def _resolve_source(program) -> CommandSource | None:
    base = _resolve_base_source(program)
    coord_addr = os.environ.get("INSITU_COORD")
    if coord_addr:
        from .coordinator import CoordinatedSource

        # under a coordinator, even a worker with no source of its own can
        # be healed by replaying another worker's recorded fix
        return CoordinatedSource(inner=base, address=coord_addr)
    return base


def _resolve_base_source(program) -> CommandSource | None:
    stack = getattr(_tls, "stack", None)
    if stack:
        return stack[-1]
    opts = program.options
    if opts.source is not None:
        return opts.source
    if opts.script is not None:
        script = opts.script
        if isinstance(script, FixProcedure):
            return ScriptSource([script])
        if isinstance(script, (list, tuple)):
            return ScriptSource(list(script))
        return ScriptSource([FixProcedure.load(script)])
    env_script = os.environ.get("INSITU_RECOVERY_SCRIPT")
    if env_script:
        return ScriptSource([FixProcedure.load(env_script)])
    bridge_addr = os.environ.get("INSITU_BRIDGE")
    if bridge_addr:
        from .console import bridge_session_source

        return bridge_session_source(bridge_addr)
    if opts.interactive == "never":
        return None
    if opts.interactive == "always" or (sys.stdin and sys.stdin.isatty()):
        from .console import TerminalConsole

        return TerminalConsole()
    return None


# --------------------------------------------------------- event building


def _safe_repr(value, limit: int = 160) -> str:
    try:
        r = repr(value)
    except Exception as exc:  # user __repr__ may itself be broken
        r = f"<unreprable {type(value).__name__}: {exc}>"
    return r if len(r) <= limit else r[: limit - 3] + "..."


def _clamp_rel(cell: CellCode, rel: StatementPath) -> StatementPath:
    """Truncate a within-cell path at statements resume cannot descend into."""
    steps = list(rel.steps)
    out: list = []
    block = cell.orig_body
    i = 0
    while i < len(steps):
        kind, idx = steps[i]
        if kind == "handler":
            # (handler, j) selects a clause; the following body step indexes it
            out.append((kind, idx))
            i += 1
            continue
        if block is None or idx >= len(block):
            break
        stmt = block[idx]
        out.append((kind, idx))
        i += 1
        if i >= len(steps):
            break
        nk, nidx = steps[i]
        if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef,
                             ast.With, ast.AsyncWith)):
            break
        if nk == "handler":
            if not isinstance(stmt, ast.Try) or nidx >= len(stmt.handlers):
                break
            block = stmt.handlers[nidx].body
            continue
        field_map = {"body": "body", "loop-body": "body", "branch-then": "body",
                     "branch-else": "orelse", "final": "finalbody"}
        block = getattr(stmt, field_map.get(nk, "body"), None)
    return StatementPath(tuple(out))


def build_event(activation, caught_cell: str, args: tuple,
                exc: BaseException) -> CrashEvent:
    """Map a caught exception back to original-source coordinates."""
    program = activation.program
    meta = program.meta

    raw: list[tuple[str, int, str]] = []   # (filename, lineno, co_name) outer->inner
    tb_head = exc.__traceback__
    f = tb_head.tb_frame.f_back if tb_head is not None else None
    above = []
    while f is not None:
        above.append((f.f_code.co_filename, f.f_lineno, f.f_code.co_name))
        f = f.f_back
    raw.extend(reversed(above))
    tb = tb_head
    while tb is not None:
        raw.append((tb.tb_frame.f_code.co_filename, tb.tb_lineno,
                    tb.tb_frame.f_code.co_name))
        tb = tb.tb_next

    frames: list[LiveFrame] = []
    for filename, lineno, co_name in reversed(raw):  # innermost first
        rec = context.file_record(filename)
        if rec is None or rec.program is not program:
            continue
        abs_path = rec.path_for_line(lineno)
        stmt_src = ""
        cell = meta.get(rec.cell_id)
        if abs_path is not None and cell is not None:
            try:
                node = _resolve_abs(program, abs_path)
                stmt_src = ast.unparse(node).splitlines()[0][:120]
            except Exception:
                stmt_src = ""
        frames.append(LiveFrame(rec.cell_id, abs_path, lineno, filename,
                                stmt_src, rec.unit))

    crash_abs = None
    for fr in frames:
        if fr.cell_id == caught_cell and fr.abs_path is not None and fr.unit in ("cell", "resume"):
            crash_abs = fr.abs_path
            break
    cell = meta.get(caught_cell)
    if crash_abs is None or cell is None:
        rel = StatementPath(((cell.block_kind if cell else "body", 0),))
        crash_abs = cell.abs_path(rel) if cell else StatementPath((("body", 0),))
    rel = StatementPath(crash_abs.steps[len(cell.origin.steps):]) if cell else StatementPath((("body", 0),))
    rel = _clamp_rel(cell, rel) if cell else rel
    location = RestartLocation(caught_cell, rel, cell.abs_path(rel) if cell else crash_abs)

    preview = {}
    table = activation.table
    try:
        names = sorted(table.keys())
    except Exception:
        names = []
    for name in names[:200]:
        preview[name] = _safe_repr(table[name])

    tb_text = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
    return CrashEvent(
        program_id=program.id,
        activation_id=activation.id,
        exception_kind=type(exc).__name__,
        message=str(exc),
        crash_location=location,
        cell_frames=frames,
        variable_preview=preview,
        traceback_text=tb_text,
        timestamp=time.time(),
        generation=activation.source_gen,
        activation=activation,
        exception=exc,
        caught_cell=caught_cell,
        caught_args=args,
    )


def _resolve_abs(program, abs_path: StatementPath):
    from .sourcemodel import resolve

    gen_source = program.source
    return resolve(gen_source.node, abs_path)


def intercept(exc: BaseException, activation, caught_cell: str | None = None,
              args: tuple = ()) -> CrashEvent:
    """Public wrapper: build the crash event for an exception."""
    cell = caught_cell or activation.program.tree.root
    return build_event(activation, cell, args, exc)


# ------------------------------------------------------------- application


def apply_pass(event: CrashEvent) -> RestartLocation:
    return event.crash_location


class ActionSpace(dict):
    """Name routing for operator statements run against a suspended crash.

    Reads walk the live scopes innermost-out, then the activation table;
    misses raise KeyError so exec falls back to module globals. Writes land
    in the innermost scope that *binds* the name in the current source, or
    in module globals when nothing does, which is exactly where the
    generated code will look for it after resuming.
    """

    def __init__(self, event: CrashEvent):
        super().__init__()
        act = event.activation
        cell = act.program.meta.get(event.caught_cell)
        frames = [act.table]
        if event.caught_args and len(event.caught_args) > 2:
            frames.extend(event.caught_args[2:])
        self.frames = frames
        self.scopes = list(cell.frame_scopes) if cell is not None else [frozenset()]
        self.globals_ns = act.program.globals_ns

    def __getitem__(self, name):
        from .errors import UnboundRead

        for frame in reversed(self.frames):
            try:
                return frame[name]
            except (KeyError, UnboundRead):
                continue
        raise KeyError(name)

    def __setitem__(self, name, value):
        for depth in range(len(self.frames) - 1, -1, -1):
            if depth < len(self.scopes) and name in self.scopes[depth]:
                self.frames[depth][name] = value
                return
        self.globals_ns[name] = value

    def __delitem__(self, name):
        for frame in reversed(self.frames):
            if name in frame:
                del frame[name]
                return
        del self.globals_ns[name]

    def snapshot(self) -> dict:
        merged: dict = {}
        for frame in self.frames:
            try:
                merged.update(frame)
            except Exception:
                pass
        return merged


def apply_action(event: CrashEvent, statement: str) -> None:
    """Run a statement against the live variables; the run stays suspended."""
    act = event.activation
    try:
        code = compile(statement, "<isr-action>", "exec")
        exec(code, act.program.globals_ns, ActionSpace(event))
    except Exception as exc:
        raise ActionError(f"{type(exc).__name__}: {exc}") from exc


class _InspectionSpace(ActionSpace):
    """ActionSpace with writes forbidden; inspection must not mutate."""

    def __setitem__(self, name, value):
        from .errors import ConsoleWriteError

        raise ConsoleWriteError(
            f"eval tried to assign {name!r}; use an action command to mutate")

    def __delitem__(self, name):
        from .errors import ConsoleWriteError

        raise ConsoleWriteError(
            f"eval tried to delete {name!r}; use an action command to mutate")


def evaluate(event: CrashEvent, expression: str):
    """Read-only look at the suspended state (console ``eval``)."""
    return eval(compile(expression, "<isr-eval>", "eval"),
                dict(event.activation.program.globals_ns),
                _InspectionSpace(event))


def _map_position(abs_old: StatementPath, pairs: dict) -> StatementPath:
    steps = list(abs_old.steps)
    while steps:
        hit = pairs.get(StatementPath(tuple(steps)))
        if hit is not None:
            return hit
        steps.pop()
    return StatementPath(())


def apply_surgery(event: CrashEvent, new_source: str) -> RestartLocation:
    """Swap in replacement source and compute where to resume.

    The replacement must keep the entry function's name and parameters. New
    cells adopt the ids of the old cells they align with, so barriers inside
    still-running frames keep working; removed cells stay registered for
    those frames. Restart lands on the first modified statement when it
    precedes the crash on the live path, otherwise on the crash statement.
    """
    act = event.activation
    program = act.program
    from .vaccinate import build_generation  # local import avoids a cycle

    old_sf = program.history[act.source_gen]
    new_sf = parse_function(new_source, program.name, origin="<surgery>")
    if new_sf.params != old_sf.params:
        raise SignatureMismatch(
            f"surgery changed parameters {old_sf.params} -> {new_sf.params}")

    diff = diff_functions(old_sf, new_sf)
    pairs = diff.old_to_new
    crash_abs_new = _map_position(event.crash_location.abs_path, pairs) \
        if diff.edits else event.crash_location.abs_path

    if not diff.edits:
        return event.crash_location

    # live frames must still exist in the new structure
    live = _live_chain(event)
    old_meta = dict(program.meta)
    origin_to_old_id: dict[tuple, str] = {}
    for cid, cell in old_meta.items():
        if cid == program.tree.root:
            continue
        mapped = pairs.get(cell.origin)
        if mapped is not None:
            origin_to_old_id[mapped.steps] = cid
    for cell_id, _pos in live:
        if cell_id == program.tree.root:
            continue
        old_cell = old_meta.get(cell_id)
        if old_cell is None:
            continue
        if pairs.get(old_cell.origin) is None:
            raise StructureChangeError(
                f"cell {cell_id} (at {old_cell.origin}) is live on the stack "
                "but its statement no longer exists in the replacement")

    with program.lock:
        program.generation += 1

        def id_for(plan) -> str:
            old_id = origin_to_old_id.get(plan.path.steps)
            if old_id is not None:
                return old_id
            while True:
                cid = f"c{next(program.cell_seq)}"
                if cid not in program.cells:
                    return cid

        try:
            alloc, cells, meta, tree = build_generation(program, new_sf, id_for)
        except Exception:
            program.generation -= 1
            raise
        program.cells.update(cells)
        program.meta.update(meta)
        program.tree = tree
        program.alloc = alloc
        program.source = new_sf
        program.history.append(new_sf)
        program.resume_cache = {
            k: v for k, v in program.resume_cache.items() if k[2] == program.generation
        }
    act.source_gen = program.generation

    fm_abs = first_modified_location(diff, new_sf)
    ordinals = order_index(new_sf.node)
    fm_rank = ordinals.get(fm_abs, len(ordinals))
    crash_rank = ordinals.get(crash_abs_new, len(ordinals))
    anchor = fm_abs if fm_rank <= crash_rank else crash_abs_new

    # pick the deepest live cell whose region contains the anchor
    live_new = [(cid, _map_position(pos, pairs) if pos is not None else None)
                for cid, pos in live]
    target_id = tree.root
    for cid, _pos in live_new:
        cell = tree.nodes.get(cid)
        if cell is None:
            continue
        o = cell.origin.steps
        if anchor.steps[:len(o)] == o and (
                cid == tree.root or
                (len(anchor.steps) > len(o) and anchor.steps[len(o)][0] == cell.block_kind)):
            target_id = cid
            break
    target = tree.nodes[target_id]

    rel_steps = anchor.steps[len(target.origin.steps):]
    # truncate at any child cell boundary: the child re-runs whole
    for child_id in target.children:
        child = tree.nodes[child_id]
        co = child.origin.steps
        if rel_steps[:len(co) - len(target.origin.steps)] == co[len(target.origin.steps):]:
            boundary = len(co) - len(target.origin.steps)
            if boundary < len(rel_steps):
                rel_steps = rel_steps[:boundary]
    rel = _clamp_rel(target, StatementPath(tuple(rel_steps)))
    if not rel.steps:
        rel = StatementPath(((target.block_kind, 0),))
    return RestartLocation(target_id, rel, target.abs_path(rel))


def _live_chain(event: CrashEvent) -> list[tuple[str, StatementPath | None]]:
    """(cell_id, position) from the caught cell outward to the root."""
    chain: list[tuple[str, StatementPath | None]] = []
    seen: set[str] = set()
    started = False
    for fr in event.cell_frames:
        if not started:
            if fr.cell_id == event.caught_cell:
                started = True
            else:
                continue
        if fr.cell_id in seen:
            continue
        seen.add(fr.cell_id)
        chain.append((fr.cell_id, fr.abs_path))
    if not chain:
        chain.append((event.caught_cell, event.crash_location.abs_path))
    root = event.activation.program.tree.root
    if all(cid != root for cid, _ in chain):
        chain.append((root, None))
    return chain


# ----------------------------------------------------------------- session


class Session:
    """One crash, one operator dialogue, at most one resume."""

    def __init__(self, event: CrashEvent, source: CommandSource):
        self.event = event
        self.source = source
        self.recorded = FixProcedure(
            exception_kind=event.exception_kind,
            cell_id=event.crash_location.cell_id,
            path=event.crash_location.path,
        )
        self.restart: RestartLocation | None = None
        self.outcome = "open"

    def run(self) -> RestartLocation:
        event = self.event
        program = event.activation.program
        allowed = program.options.allowed_commands
        self.source.begin(event)
        try:
            while True:
                cmd = self.source.next_command(event)
                if cmd is None:
                    self.outcome = "exhausted"
                    raise CommandSourceExhausted(
                        f"no command resumed {event.signature}")
                if cmd.kind == "abort":
                    self.outcome = "aborted"
                    record(cmd, self.recorded)
                    raise RecoveryAbort(event)
                if cmd.kind not in ("pass", "action", "surgery"):
                    self.source.report(event, cmd, False,
                                       f"unknown command {cmd.kind!r}")
                    continue
                if cmd.kind not in allowed:
                    self.source.report(event, cmd, False,
                                       f"{cmd.kind!r} is disabled here")
                    continue
                try:
                    restart = self._apply(cmd)
                except (ActionError, SignatureMismatch, StructureChangeError,
                        IllegalRestart) as exc:
                    self.source.report(event, cmd, False,
                                       f"{type(exc).__name__}: {exc}")
                    continue
                record(cmd, self.recorded)
                if restart is None:
                    self.source.report(event, cmd, True, "applied")
                    continue
                # validate now so an unresumable location fails the command,
                # not the resume
                meta = program.meta[restart.cell_id]
                try:
                    context.synthesize_unfinished(program, meta, restart.path)
                except IllegalRestart as exc:
                    self.source.report(event, cmd, False,
                                       f"IllegalRestart: {exc}")
                    continue
                self.source.report(event, cmd, True, f"resuming at {restart.abs_path}")
                self.restart = restart
                self.outcome = "resumed"
                event.activation.last_fix = self.recorded
                return restart
        finally:
            resumed = self.outcome == "resumed"
            try:
                self.source.end(event, resumed)
            except Exception:
                pass
            event.activation.pending_session = None

    def _apply(self, cmd: RecoveryCommand) -> RestartLocation | None:
        if cmd.kind == "pass":
            return apply_pass(self.event)
        if cmd.kind == "action":
            apply_action(self.event, cmd.payload or "")
            return None
        return apply_surgery(self.event, cmd.payload or "")


def replay(procedure: FixProcedure, activation, timeout: float = 30.0) -> str:
    """Feed a recorded procedure into an activation's open session."""
    session = activation.pending_session
    if session is None or not isinstance(session.source, QueueSource):
        raise RuntimeError(f"{activation} has no open queue-driven session")
    for cmd in procedure.commands:
        session.source.push(cmd)
    if not session.source.finished.wait(timeout):
        return "timeout"
    return session.outcome


# ------------------------------------------------------------ crash entry


def handle_crash(activation, cell_id: str, args: tuple, exc: BaseException):
    """Barrier entry point.

    Returns the continuation the barrier should call next (the unfinished
    remainder of its cell), or raises. The barrier invokes it outside its
    except clause, so a crash inside the continuation lands back here
    without growing the stack.
    """
    if isinstance(exc, ResumeUnwind):
        if exc.target_cell == cell_id:
            meta = activation.program.meta[cell_id]
            fn = context.synthesize_unfinished(activation.program, meta, exc.restart)
            activation.status = "running"
            return fn
        raise exc

    if getattr(exc, "_isr_seen", False):
        raise exc

    activation.status = "crashed"
    activation.crash_count += 1
    event = build_event(activation, cell_id, args, exc)

    sig = event.signature
    count = activation.retry_counts.get(sig, 0) + 1
    activation.retry_counts[sig] = count
    if count > activation.program.options.max_retries:
        err = RetryBudgetExceeded(
            f"crash signature {sig} recurred {count} times")
        err._isr_seen = True  # outer barriers must not open a second session
        raise err from exc

    source = _resolve_source(activation.program)
    if source is None:
        exc._isr_seen = True
        raise exc

    session = Session(event, source)
    activation.pending_session = session
    activation.status = "recovering"
    try:
        restart = session.run()
    except CommandSourceExhausted:
        exc._isr_seen = True
        activation.status = "crashed"
        raise exc from None
    except RecoveryAbort:
        activation.status = "aborted"
        raise

    if restart.cell_id == cell_id:
        meta = activation.program.meta[cell_id]
        fn = context.synthesize_unfinished(activation.program, meta, restart.path)
        activation.status = "running"
        return fn
    raise ResumeUnwind(restart.cell_id, restart.path, event)
