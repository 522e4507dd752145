"""Terminal REPL, diagnosis call, frame schema, and the socket bridge."""

import io
import json
import socket
import textwrap
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from insitu import BridgeProtocolError, RecoveryAbort, RecoveryOptions
from insitu.console import (
    BridgeServer,
    BridgeSessionSource,
    SessionFrame,
    TerminalConsole,
    decode_frame,
    diagnose,
    render_event,
    render_stack,
    render_variables,
)
from insitu.vaccinate import vaccinate_source

_SEQ = iter(range(10_000))
GOLDEN = Path(__file__).resolve().parent.parent / "docs" / "protocol" / "golden"


def make_program(src, name, globals_ns=None, **kw):
    return vaccinate_source(textwrap.dedent(src), name,
                            dict(globals_ns or {}),
                            program_id=f"tc{next(_SEQ)}", **kw)


class Trip:
    def __init__(self, at, exc=ValueError):
        self.at = at
        self.exc = exc
        self.armed = True

    def __call__(self, x):
        if self.armed and x == self.at:
            self.armed = False
            raise self.exc(f"tripped at {x!r}")


TALLY_SRC = """
def tally(xs, scale):
    total = 0.0
    hits = []
    for x in xs:
        probe(x)
        total += x * scale
        hits.append(x)
    return total, hits
"""


def run_console(script_lines, src=TALLY_SRC, name="tally",
                args=([1, 2, 3], 1), trip_at=2, **prog_kw):
    """Drive a crash through a TerminalConsole fed with scripted input."""
    trip = Trip(at=trip_at)
    stdin = io.StringIO("".join(line + "\n" for line in script_lines))
    stdout = io.StringIO()
    console = TerminalConsole(in_stream=stdin, out_stream=stdout)
    prog = make_program(src, name, {"probe": trip},
                        options=RecoveryOptions(source=console), **prog_kw)
    result = error = None
    try:
        result = prog.entry(*args)
    except BaseException as exc:  # noqa: BLE001 - surfaced to the test
        error = exc
    return result, error, stdout.getvalue()


# ------------------------------------------------------------------ rendering


def _event():
    captured = {}

    class Grab(TerminalConsole):
        def begin(self, event):
            captured["event"] = event
            super().begin(event)

    trip = Trip(at=2)
    stdin = io.StringIO("pass\n")
    console = Grab(in_stream=stdin, out_stream=io.StringIO())
    prog = make_program(TALLY_SRC, "tally", {"probe": trip},
                        options=RecoveryOptions(source=console))
    prog.entry([1, 2], 1)
    return captured["event"]


def test_render_event_is_a_variable_annotated_trace():
    text = render_event(_event())
    assert "ValueError: tripped at 2" in text
    assert "stack (innermost first):" in text
    assert "probe(x)" in text
    assert "total" in text and "1.0" in text
    assert "hits" in text and "[1]" in text


def test_render_stack_marks_the_crash_frame():
    lines = render_stack(_event()).splitlines()
    assert lines[1].endswith("<- crash")


def test_render_variables_handles_empty_preview():
    event = _event()
    event.variable_preview = {}
    assert "none bound" in render_variables(event)


# ------------------------------------------------------------- terminal REPL


def test_repl_pass_resumes():
    result, error, out = run_console(["pass"])
    assert error is None
    assert result == (6.0, [1, 2, 3])
    assert "crash: ValueError" in out
    assert "resumed" in out


def test_repl_inspection_commands():
    result, _error, out = run_console([
        "stack",
        "vars",
        "vars total",
        "eval total * 10",
        "eval (total := 5)",
        "pass",
    ])
    assert result == (6.0, [1, 2, 3])
    assert out.count("stack (innermost first):") >= 2  # begin + stack command
    assert "total = 1.0" in out          # vars total, live read
    assert "10.0" in out                 # eval result
    assert "refused" in out              # eval must not write


def test_repl_unknown_command_shows_help_and_continues():
    result, _error, out = run_console(["frobnicate", "pass"])
    assert result == (6.0, [1, 2, 3])
    assert "unknown command 'frobnicate'" in out
    assert "surgery <file>" in out       # help text listed the verbs


def test_repl_action_and_surgery_read_files(tmp_path):
    fixfile = tmp_path / "fix.py"
    fixfile.write_text("total += 40\n")
    result, _error, out = run_console([
        "action nowhere/missing.py",
        f"action {fixfile}",
        "pass",
    ])
    assert result == (46.0, [1, 2, 3])
    assert "cannot read" in out


def test_repl_quit_aborts():
    _result, error, out = run_console(["quit"])
    assert isinstance(error, RecoveryAbort)
    assert "session closed" in out


def test_repl_eof_leaves_crash_unhandled():
    _result, error, out = run_console([])
    assert isinstance(error, ValueError)
    assert "input closed" in out


def test_repl_empty_and_blank_lines_are_ignored():
    result, _error, _out = run_console(["", "   ", "pass"])
    assert result == (6.0, [1, 2, 3])


# -------------------------------------------------------------------- diag


def test_diagnose_without_endpoint_is_a_notice(monkeypatch):
    monkeypatch.delenv("INSITU_DIAG_ENDPOINT", raising=False)
    note = diagnose(_event())
    assert "not configured" in note


class _StubHandler(BaseHTTPRequestHandler):
    captured = {}
    reply = {"text": "looks like a single-class batch; guard the statement"}

    def do_POST(self):
        n = int(self.headers.get("Content-Length", 0))
        _StubHandler.captured["body"] = self.rfile.read(n).decode()
        _StubHandler.captured["auth"] = self.headers.get("Authorization")
        data = json.dumps(self.reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *a):  # keep test output clean
        pass


@pytest.fixture()
def stub_endpoint():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/complete"
    server.shutdown()


def test_diagnose_posts_trace_and_source(stub_endpoint, monkeypatch):
    monkeypatch.setenv("INSITU_DIAG_ENDPOINT", stub_endpoint)
    monkeypatch.setenv("INSITU_DIAG_TOKEN", "sekrit")
    event = _event()
    answer = diagnose(event)
    assert answer == _StubHandler.reply["text"]  # verbatim, nothing applied
    sent = json.loads(_StubHandler.captured["body"])
    assert "tripped at 2" in sent["prompt"]      # annotated trace included
    assert "def tally" in sent["prompt"]         # program source included
    assert _StubHandler.captured["auth"] == "Bearer sekrit"


def test_diagnose_survives_unreachable_endpoint(monkeypatch):
    monkeypatch.setenv("INSITU_DIAG_ENDPOINT", "http://127.0.0.1:9/nope")
    note = diagnose(_event(), timeout=0.5)
    assert "diagnosis unavailable" in note


def test_repl_diag_keeps_session_open(monkeypatch):
    monkeypatch.delenv("INSITU_DIAG_ENDPOINT", raising=False)
    result, _error, out = run_console(["diag", "pass"])
    assert result == (6.0, [1, 2, 3])
    assert "not configured" in out


# ------------------------------------------------------------- frame schema


def test_golden_frames_round_trip():
    goldens = sorted(GOLDEN.glob("*.json"))
    assert len(goldens) == 9
    for path in goldens:
        data = json.loads(path.read_text())
        frame = SessionFrame.from_json(data)
        assert frame.to_json() == data, path.name


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.update(v=2), "version"),
    (lambda d: d.update(kind="PING"), "kind"),
    (lambda d: d.update(session=""), "session"),
    (lambda d: d.update(seq=0), "seq"),
    (lambda d: d.update(seq="3"), "seq"),
    (lambda d: d.update(body=[1]), "body"),
])
def test_frame_validation_rejects(mutate, msg):
    data = json.loads((GOLDEN / "state.json").read_text())
    mutate(data)
    with pytest.raises(BridgeProtocolError, match=msg):
        SessionFrame.from_json(data)


def test_command_frame_payload_rules():
    base = json.loads((GOLDEN / "command_action.json").read_text())
    base["body"] = {"kind": "defrag"}
    with pytest.raises(BridgeProtocolError, match="command kind"):
        SessionFrame.from_json(base)
    base["body"] = {"kind": "action", "payload": 7}
    with pytest.raises(BridgeProtocolError, match="payload"):
        SessionFrame.from_json(base)


def test_decode_frame_rejects_bad_json():
    with pytest.raises(BridgeProtocolError, match="JSON"):
        decode_frame(b"{nope")


# ------------------------------------------------------------------- bridge


class Client:
    """Tiny line-oriented test client for a bridge server."""

    def __init__(self, server: BridgeServer, timeout=5.0):
        self.sock = socket.create_connection((server.host, server.port),
                                             timeout=timeout)
        self.file = self.sock.makefile("rb")

    def read_frame(self) -> SessionFrame:
        line = self.file.readline()
        if not line:
            raise AssertionError("bridge closed the connection")
        return decode_frame(line)

    def read_until(self, kind: str) -> SessionFrame:
        while True:
            frame = self.read_frame()
            if frame.kind == kind:
                return frame

    def send(self, frame_dict: dict) -> None:
        self.sock.sendall((json.dumps(frame_dict) + "\n").encode())

    def send_command(self, session, seq, kind, payload=None) -> None:
        self.send({"v": 1, "kind": "COMMAND", "session": session, "seq": seq,
                   "body": {"kind": kind, "payload": payload}})

    def close(self) -> None:
        # makefile dups the fd; both must close for the server to see EOF
        for closer in (self.file, self.sock):
            try:
                closer.close()
            except OSError:
                pass


@pytest.fixture()
def bridge():
    server = BridgeServer("127.0.0.1:0").start()
    yield server
    server.close()


def _crash_in_thread(bridge, src=TALLY_SRC, name="tally", args=([1, 2, 3], 1),
                     trip_at=2, **source_kw):
    trip = Trip(at=trip_at)
    source = BridgeSessionSource(bridge, **source_kw)
    prog = make_program(src, name, {"probe": trip},
                        options=RecoveryOptions(source=source,
                                                interactive="never"))
    box = {}

    def run():
        try:
            box["result"] = prog.entry(*args)
        except BaseException as exc:  # noqa: BLE001
            box["error"] = exc

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return t, box


def test_bridge_session_end_to_end(bridge):
    t, box = _crash_in_thread(bridge)
    client = Client(bridge)
    crash = client.read_until("CRASH")
    assert crash.seq == 1
    assert crash.body["exception"] == "ValueError"
    assert crash.body["frames"][0]["statement"].startswith("probe")
    sid = crash.session_id

    client.send_command(sid, crash.seq + 1, "action", "total += 100")
    result = client.read_until("RESULT")
    assert result.body["ok"] is True
    state = client.read_until("STATE")
    assert state.body["variables"]["total"] == "101.0"

    client.send_command(sid, state.seq + 1, "pass")
    result2 = client.read_until("RESULT")
    assert result2.body["ok"] is True and "resuming" in result2.body["detail"]
    resumed = client.read_until("RESUMED")
    assert resumed.body["status"] == "resumed"

    t.join(timeout=10)
    assert box.get("result") == (106.0, [1, 2, 3])
    client.close()


def test_bridge_replays_frames_to_late_consoles(bridge):
    t, box = _crash_in_thread(bridge)
    deadline = time.monotonic() + 5
    while not bridge.sessions and time.monotonic() < deadline:
        time.sleep(0.01)
    assert bridge.sessions, "crash session never registered"

    client = Client(bridge)  # connects after the CRASH frame was published
    crash = client.read_until("CRASH")
    client.send_command(crash.session_id, crash.seq + 1, "pass")
    client.read_until("RESUMED")
    t.join(timeout=10)
    assert box.get("result") == (6.0, [1, 2, 3])
    client.close()


def test_bridge_rejects_out_of_order_seq(bridge):
    t, box = _crash_in_thread(bridge)
    client = Client(bridge)
    crash = client.read_until("CRASH")
    sid = crash.session_id

    client.send_command(sid, crash.seq, "pass")  # same seq as CRASH: stale
    refusal = client.read_until("RESULT")
    assert refusal.body["ok"] is False
    assert "out-of-order" in refusal.body["detail"]

    client.send_command(sid, refusal.seq + 1, "pass")
    client.read_until("RESUMED")
    t.join(timeout=10)
    assert box.get("result") == (6.0, [1, 2, 3])
    client.close()


def test_bridge_answers_malformed_lines_and_stays_up(bridge):
    t, box = _crash_in_thread(bridge)
    client = Client(bridge)
    crash = client.read_until("CRASH")

    client.sock.sendall(b"this is not json\n")
    bad = client.read_until("RESULT")
    assert bad.body["ok"] is False and "malformed" in bad.body["detail"]

    client.send({"v": 1, "kind": "STATE", "session": crash.session_id,
                 "seq": 99, "body": {}})
    wrong = client.read_until("RESULT")
    assert "only send COMMAND" in wrong.body["detail"]

    client.send_command(crash.session_id, 100, "pass")
    client.read_until("RESUMED")
    t.join(timeout=10)
    assert box.get("result") == (6.0, [1, 2, 3])
    client.close()


def test_bridge_refuses_unknown_session(bridge):
    t, box = _crash_in_thread(bridge)
    client = Client(bridge)
    crash = client.read_until("CRASH")

    client.send_command("p0/zz#0", 50, "pass")
    lost = client.read_until("RESULT")
    assert "no such open session" in lost.body["detail"]

    client.send_command(crash.session_id, crash.seq + 1, "pass")
    client.read_until("RESUMED")
    t.join(timeout=10)
    assert "result" in box
    client.close()


def test_bridge_channel_drop_without_tty_gives_up(bridge):
    t, box = _crash_in_thread(bridge, grace=0.2)
    client = Client(bridge)
    client.read_until("CRASH")
    client.close()  # console vanishes mid-session
    t.join(timeout=10)
    assert not t.is_alive()
    assert isinstance(box.get("error"), ValueError)  # original crash surfaced


def test_bridge_env_var_resolves_to_a_shared_server(monkeypatch):
    from insitu import console as console_mod

    monkeypatch.setenv("INSITU_BRIDGE", "127.0.0.1:0")
    trip = Trip(at=1)
    prog = make_program(TALLY_SRC, "tally", {"probe": trip})
    box = {}

    def run():
        try:
            box["result"] = prog.entry([1], 2)
        except BaseException as exc:  # noqa: BLE001
            box["error"] = exc

    t = threading.Thread(target=run, daemon=True)
    t.start()
    deadline = time.monotonic() + 5
    server = None
    while time.monotonic() < deadline:
        server = console_mod._shared_servers.get("127.0.0.1:0")
        if server is not None and server.sessions:
            break
        time.sleep(0.01)
    assert server is not None and server.sessions

    client = Client(server)
    crash = client.read_until("CRASH")
    client.send_command(crash.session_id, crash.seq + 1, "pass")
    client.read_until("RESUMED")
    t.join(timeout=10)
    assert box.get("result") == (2.0, [1])
    client.close()
