"""Operator surfaces for a held-open crash.

Three ways to drive the same recovery session: a terminal REPL, an
LLM-assisted diagnosis call, and a loopback socket bridge speaking
newline-delimited JSON frames so external consoles (including the web UI)
can inspect and command the session remotely.
"""

from __future__ import annotations

import importlib.resources
import itertools
import json
import os
import socket
import sys
import threading
import urllib.request
from dataclasses import dataclass, field

from .errors import BridgeProtocolError, ConsoleWriteError, InsituError
from .recovery import (
    CommandSource,
    CrashEvent,
    RecoveryCommand,
    _safe_repr,
    evaluate,
)


# ----------------------------------------------------------------- rendering


def render_stack(event: CrashEvent) -> str:
    lines = ["stack (innermost first):"]
    for i, fr in enumerate(event.cell_frames):
        where = str(fr.abs_path) if fr.abs_path is not None else "?"
        marker = "  <- crash" if i == 0 else ""
        stmt = f"  {fr.statement}" if fr.statement else ""
        lines.append(f"  [{fr.cell_id}] {where}{stmt}{marker}")
    if len(lines) == 1:
        lines.append("  (no frames mapped)")
    return "\n".join(lines)


def render_variables(event: CrashEvent) -> str:
    if not event.variable_preview:
        return "variables: (none bound yet)"
    width = max(len(n) for n in event.variable_preview)
    rows = [f"  {name.ljust(width)} = {value}"
            for name, value in sorted(event.variable_preview.items())]
    return "variables:\n" + "\n".join(rows)


def render_event(event: CrashEvent) -> str:
    """The variable-annotated stack trace an operator sees first."""
    head = (f"crash: {event.exception_kind}: {event.message}\n"
            f"  program {event.program_id}  activation {event.activation_id}"
            f"  generation {event.generation}\n"
            f"  cell {event.crash_location.cell_id}"
            f" at {event.crash_location.path}")
    return "\n".join([head, render_stack(event), render_variables(event)])


# ----------------------------------------------------------------- diagnosis

ENDPOINT_VAR = "INSITU_DIAG_ENDPOINT"
TOKEN_VAR = "INSITU_DIAG_TOKEN"


def _prompt_template() -> str:
    return importlib.resources.files("insitu").joinpath(
        "console_prompt.txt").read_text()


def diagnose(event: CrashEvent, program_source: str | None = None,
             timeout: float = 30.0) -> str:
    """Ask a configured completion endpoint to explain the crash.

    Returns the endpoint's text verbatim; never applies anything. With no
    endpoint configured, or on any transport failure, returns a notice so
    the session keeps going.
    """
    endpoint = os.environ.get(ENDPOINT_VAR)
    if not endpoint:
        return (f"diagnosis not configured: set {ENDPOINT_VAR} to a "
                f"completion endpoint URL ({TOKEN_VAR} adds a bearer token)")
    if program_source is None:
        act = event.activation
        program_source = act.program.source.source_text if act else ""
    prompt = _prompt_template().format(trace=render_event(event),
                                       source=program_source)
    req = urllib.request.Request(
        endpoint,
        data=json.dumps({"prompt": prompt}).encode(),
        headers={"Content-Type": "application/json"},
    )
    token = os.environ.get(TOKEN_VAR)
    if token:
        req.add_header("Authorization", f"Bearer {token}")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read().decode("utf-8", "replace")
    except Exception as exc:  # noqa: BLE001 - any transport failure is non-fatal
        return f"diagnosis unavailable ({type(exc).__name__}: {exc})"
    try:
        data = json.loads(raw)
    except ValueError:
        return raw
    if isinstance(data, dict):
        for key in ("text", "completion", "content", "answer"):
            if isinstance(data.get(key), str):
                return data[key]
    return raw


# --------------------------------------------------------------- terminal UI

_HELP = """commands:
  stack            show the annotated stack trace again
  vars [name]      show variable previews, or one live value
  eval <expr>      evaluate read-only against the live state
  pass             retry the crashed statement
  action <file>    run the file's statements against the live state
  surgery <file>   replace the entry function with the file's source
  diag             ask the configured endpoint to explain the crash
  quit             abandon recovery and tear the run down"""


class TerminalConsole(CommandSource):
    """Line-oriented REPL attached to one crashed activation."""

    def __init__(self, in_stream=None, out_stream=None):
        self._in = in_stream
        self._out = out_stream

    def _say(self, text: str) -> None:
        out = self._out or sys.stdout
        out.write(text + "\n")
        out.flush()

    def _read(self) -> str | None:
        out = self._out or sys.stdout
        out.write("(recover) ")
        out.flush()
        line = (self._in or sys.stdin).readline()
        return line if line else None

    def begin(self, event: CrashEvent) -> None:
        self._say(render_event(event))
        self._say("run is held open; type 'help' for commands")

    def next_command(self, event: CrashEvent) -> RecoveryCommand | None:
        while True:
            line = self._read()
            if line is None:
                self._say("input closed; leaving the crash unhandled")
                return None
            line = line.strip()
            if not line:
                continue
            verb, _, rest = line.partition(" ")
            rest = rest.strip()
            if verb == "help":
                self._say(_HELP)
            elif verb == "stack":
                self._say(render_stack(event))
            elif verb == "vars":
                self._show_vars(event, rest)
            elif verb == "eval":
                self._eval(event, rest)
            elif verb == "diag":
                self._say(diagnose(event))
            elif verb == "pass":
                return RecoveryCommand("pass")
            elif verb == "quit":
                return RecoveryCommand("abort")
            elif verb in ("action", "surgery"):
                payload = self._read_payload(rest)
                if payload is not None:
                    return RecoveryCommand(verb, payload)
            else:
                self._say(f"unknown command {verb!r}")
                self._say(_HELP)

    def _show_vars(self, event: CrashEvent, name: str) -> None:
        if not name:
            self._say(render_variables(event))
            return
        try:
            self._say(f"  {name} = {_safe_repr(evaluate(event, name))}")
        except Exception as exc:  # noqa: BLE001 - shown, not raised
            self._say(f"  {name}: {type(exc).__name__}: {exc}")

    def _eval(self, event: CrashEvent, expr: str) -> None:
        if not expr:
            self._say("usage: eval <expression>")
            return
        try:
            self._say(_safe_repr(evaluate(event, expr), limit=2000))
        except ConsoleWriteError as exc:
            self._say(f"refused: {exc}")
        except Exception as exc:  # noqa: BLE001
            self._say(f"error: {type(exc).__name__}: {exc}")

    def _read_payload(self, path: str) -> str | None:
        if not path:
            self._say("usage: action <file> | surgery <file>")
            return None
        try:
            with open(path, "r") as f:
                return f.read()
        except OSError as exc:
            self._say(f"cannot read {path!r}: {exc}")
            return None

    def report(self, event, command, ok, detail) -> None:
        self._say(("ok: " if ok else "failed: ") + detail)

    def end(self, event, resumed) -> None:
        self._say("resumed" if resumed else "session closed without resuming")


# ------------------------------------------------------------ frame protocol

PROTOCOL_VERSION = 1
FRAME_KINDS = ("CRASH", "STATE", "COMMAND", "RESULT", "RESUMED", "WORKERS")
COMMAND_KINDS = ("pass", "action", "surgery", "abort")


@dataclass(frozen=True)
class SessionFrame:
    """One protocol message; the wire form is this as JSON plus newline."""

    kind: str
    session_id: str
    seq: int
    body: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"v": PROTOCOL_VERSION, "kind": self.kind,
                "session": self.session_id, "seq": self.seq, "body": self.body}

    def encode(self) -> bytes:
        return (json.dumps(self.to_json(), separators=(",", ":")) + "\n").encode()

    @classmethod
    def from_json(cls, data) -> "SessionFrame":
        if not isinstance(data, dict):
            raise BridgeProtocolError("frame must be a JSON object")
        if data.get("v") != PROTOCOL_VERSION:
            raise BridgeProtocolError(
                f"unsupported protocol version {data.get('v')!r}")
        kind = data.get("kind")
        if kind not in FRAME_KINDS:
            raise BridgeProtocolError(f"unknown frame kind {kind!r}")
        session_id = data.get("session")
        if not isinstance(session_id, str) or not session_id:
            raise BridgeProtocolError("frame missing session id")
        seq = data.get("seq")
        if not isinstance(seq, int) or isinstance(seq, bool) or seq < 1:
            raise BridgeProtocolError(f"bad seq {seq!r}")
        body = data.get("body", {})
        if not isinstance(body, dict):
            raise BridgeProtocolError("frame body must be an object")
        if kind == "COMMAND":
            ck = body.get("kind")
            if ck not in COMMAND_KINDS:
                raise BridgeProtocolError(f"unknown command kind {ck!r}")
            payload = body.get("payload")
            if payload is not None and not isinstance(payload, str):
                raise BridgeProtocolError("command payload must be text")
        return cls(kind, session_id, seq, body)


def decode_frame(line: bytes | str) -> SessionFrame:
    try:
        data = json.loads(line)
    except ValueError as exc:
        raise BridgeProtocolError(f"frame is not valid JSON: {exc}") from exc
    return SessionFrame.from_json(data)


# -------------------------------------------------------------- bridge server

BRIDGE_VAR = "INSITU_BRIDGE"
_session_counter = itertools.count(1)


class _BridgeSession:
    """Server-side state for one crashed activation's dialogue."""

    def __init__(self, session_id: str):
        import queue

        self.id = session_id
        self.seq = 0                 # last seq used, either direction
        self.log: list[SessionFrame] = []
        self.commands: "queue.Queue[RecoveryCommand]" = queue.Queue()
        self.open = True

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq


class BridgeServer:
    """Holds crash sessions and speaks frames to connected consoles.

    One server per process; sessions attach as crashes happen. Every
    connected client sees every open session's frames (replayed on
    connect), and any client may command any session; ordering is enforced
    through the per-session seq.
    """

    def __init__(self, bind: str = "127.0.0.1:0"):
        host, _, port = bind.rpartition(":")
        self._listener = socket.create_server((host or "127.0.0.1", int(port)))
        self.host, self.port = self._listener.getsockname()[:2]
        self.address = f"{self.host}:{self.port}"
        self.sessions: dict[str, _BridgeSession] = {}
        self._clients: list[socket.socket] = []
        self._ever_connected = False
        self._lock = threading.RLock()
        self._closed = False
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "BridgeServer":
        t = threading.Thread(target=self._accept_loop,
                             name=f"isr-bridge-{self.port}", daemon=True)
        t.start()
        self._accept_thread = t
        return self

    def close(self) -> None:
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for c in self._clients:
                try:
                    c.close()
                except OSError:
                    pass
            self._clients.clear()

    @property
    def closed(self) -> bool:
        return self._closed

    def has_clients(self) -> bool:
        with self._lock:
            return bool(self._clients)

    def had_client(self) -> bool:
        return self._ever_connected

    # ---- session side

    def open_session(self, event: CrashEvent) -> _BridgeSession:
        sid = (f"{event.program_id}/{event.activation_id}"
               f"#{next(_session_counter)}")
        session = _BridgeSession(sid)
        with self._lock:
            self.sessions[sid] = session
        self.send(sid, "CRASH", event.to_json())
        return session

    def close_session(self, session_id: str) -> None:
        with self._lock:
            session = self.sessions.pop(session_id, None)
        if session is not None:
            session.open = False

    def send(self, session_id: str, kind: str, body: dict) -> SessionFrame:
        with self._lock:
            session = self.sessions.get(session_id)
            if session is None:
                raise BridgeProtocolError(f"no open session {session_id!r}")
            frame = SessionFrame(kind, session_id, session.next_seq(), body)
            session.log.append(frame)
            clients = list(self._clients)
        data = frame.encode()
        for c in clients:
            self._write(c, data)
        return frame

    # ---- socket side

    def _write(self, client: socket.socket, data: bytes) -> None:
        try:
            client.sendall(data)
        except OSError:
            self._drop(client)

    def _drop(self, client: socket.socket) -> None:
        with self._lock:
            if client in self._clients:
                self._clients.remove(client)
        try:
            client.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                client, _addr = self._listener.accept()
            except OSError:
                return
            with self._lock:
                self._clients.append(client)
                self._ever_connected = True
                backlog = [f for s in self.sessions.values() for f in s.log]
            for frame in backlog:
                self._write(client, frame.encode())
            threading.Thread(target=self._read_loop, args=(client,),
                             daemon=True).start()

    def _read_loop(self, client: socket.socket) -> None:
        buf = b""
        while not self._closed:
            try:
                chunk = client.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            buf += chunk
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                if line.strip():
                    self._handle_line(line)
        self._drop(client)

    def _handle_line(self, line: bytes) -> None:
        try:
            frame = decode_frame(line)
        except BridgeProtocolError as exc:
            self._error_result("-", 0, f"malformed frame: {exc}")
            return
        if frame.kind != "COMMAND":
            self._error_result(frame.session_id, frame.seq,
                               f"clients may only send COMMAND, got {frame.kind}")
            return
        with self._lock:
            session = self.sessions.get(frame.session_id)
            if session is None or not session.open:
                self._error_result(frame.session_id, frame.seq,
                                   "no such open session")
                return
            if frame.seq <= session.seq:
                # out-of-order or replayed command: refuse, keep the session
                self._error_result(frame.session_id, frame.seq,
                                   f"out-of-order seq {frame.seq} (have {session.seq})")
                return
            session.seq = frame.seq
        session.commands.put(
            RecoveryCommand(frame.body["kind"], frame.body.get("payload")))

    def _error_result(self, session_id: str, seq: int, detail: str) -> None:
        with self._lock:
            session = self.sessions.get(session_id)
            if session is not None:
                frame = SessionFrame("RESULT", session_id, session.next_seq(),
                                     {"ok": False, "detail": detail})
                session.log.append(frame)
            else:
                # nothing to anchor ordering to; still tell the operator
                frame = SessionFrame("RESULT", session_id or "-", max(seq, 1),
                                     {"ok": False, "detail": detail})
            clients = list(self._clients)
        for c in clients:
            self._write(c, frame.encode())


class BridgeSessionSource(CommandSource):
    """CommandSource that proxies one session through a BridgeServer."""

    def __init__(self, server: BridgeServer, grace: float | None = None,
                 timeout: float | None = None):
        self.server = server
        env_grace = os.environ.get("INSITU_BRIDGE_GRACE")
        self.grace = grace if grace is not None else (
            float(env_grace) if env_grace else 2.0)
        env_timeout = os.environ.get("INSITU_BRIDGE_TIMEOUT")
        self.timeout = timeout if timeout is not None else (
            float(env_timeout) if env_timeout else None)
        self._session: _BridgeSession | None = None
        self._fallback: CommandSource | None = None

    def begin(self, event: CrashEvent) -> None:
        self._session = self.server.open_session(event)

    def next_command(self, event: CrashEvent) -> RecoveryCommand | None:
        import queue

        if self._fallback is not None:
            return self._fallback.next_command(event)
        assert self._session is not None
        waited = 0.0
        dropped_for = 0.0
        while True:
            try:
                return self._session.commands.get(timeout=0.1)
            except queue.Empty:
                pass
            waited += 0.1
            if self.timeout is not None and waited >= self.timeout:
                return None
            if self.server.had_client() and not self.server.has_clients():
                dropped_for += 0.1
                if dropped_for >= self.grace:
                    return self._fall_back(event)
            else:
                dropped_for = 0.0

    def _fall_back(self, event: CrashEvent) -> RecoveryCommand | None:
        # the console went away mid-session; hand the dialogue to a human
        # terminal when one is attached, otherwise give up on this crash
        if sys.stdin is not None and sys.stdin.isatty():
            self._fallback = TerminalConsole()
            self._fallback.begin(event)
            return self._fallback.next_command(event)
        return None

    def report(self, event, command, ok, detail) -> None:
        if self._fallback is not None:
            self._fallback.report(event, command, ok, detail)
            return
        sid = self._session.id
        self.server.send(sid, "RESULT",
                         {"ok": ok, "command": command.kind, "detail": detail})
        if ok and command.kind == "action":
            act = event.activation
            preview = {}
            try:
                names = sorted(act.table.keys())
            except InsituError:
                names = []
            for name in names[:200]:
                preview[name] = _safe_repr(act.table[name])
            self.server.send(sid, "STATE",
                             {"status": "recovering", "variables": preview})

    def end(self, event, resumed) -> None:
        if self._fallback is not None:
            self._fallback.end(event, resumed)
            return
        sid = self._session.id
        if resumed:
            self.server.send(sid, "RESUMED", {"status": "resumed"})
        else:
            self.server.send(sid, "STATE", {"status": "closed"})
        self.server.close_session(sid)


_shared_servers: dict[str, BridgeServer] = {}
_shared_lock = threading.Lock()


def bridge_session_source(address: str) -> BridgeSessionSource:
    """Source used when the bridge env var names a bind address."""
    with _shared_lock:
        server = _shared_servers.get(address)
        if server is None or server.closed:
            server = BridgeServer(address).start()
            _shared_servers[address] = server
    return BridgeSessionSource(server)
