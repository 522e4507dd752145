"""Fix sharing across worker processes.

When several workers hit the same fault, one of them (the first to
announce) is designated the fix host: its recovery session runs normally
(script, console, or bridge). The procedure it records is then broadcast
to every other worker crashed with the same signature, and each replays
it locally. Workers crashed with a different signature are left alone;
each signature gets its own fix host. Procedures outlive the session
that produced them: a worker announcing an already-fixed signature is
served the cached procedure directly, with no new fix host.

Wire format: 4-byte big-endian length prefix, then one JSON object.
Message kinds: HELLO, CRASH, FIX, ACK, RESUME, STATUS. All carry v=1.
"""

from __future__ import annotations

import json
import os
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .recovery import CommandSource, FixProcedure, RecoveryCommand

PROTOCOL_VERSION = 1
ADDRESS_VAR = "INSITU_COORD"
WORKER_VAR = "INSITU_WORKER_ID"
TIMEOUT_VAR = "INSITU_COORD_TIMEOUT"
DEFAULT_TIMEOUT = 30.0

_HEADER = struct.Struct(">I")
_MAX_MESSAGE = 64 * 1024 * 1024


def send_message(sock: socket.socket, message: dict) -> None:
    data = json.dumps({"v": PROTOCOL_VERSION, **message}).encode()
    sock.sendall(_HEADER.pack(len(data)) + data)


def recv_message(sock: socket.socket) -> dict | None:
    header = _recv_exact(sock, _HEADER.size)
    if header is None:
        return None
    (length,) = _HEADER.unpack(header)
    if length > _MAX_MESSAGE:
        raise ValueError(f"message of {length} bytes exceeds the cap")
    data = _recv_exact(sock, length)
    if data is None:
        return None
    return json.loads(data)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError:
            return None
        if not chunk:
            return None
        buf += chunk
    return buf


def signature_key(signature) -> str:
    """Stable string form of (exception_kind, cell_id, path steps)."""
    kind, cell, steps = signature
    return f"{kind}@{cell}:{'/'.join(f'{k}[{i}]' for k, i in steps)}"


def _signature_json(signature) -> list:
    kind, cell, steps = signature
    return [kind, cell, [[k, i] for k, i in steps]]


def _signature_from_json(data) -> tuple:
    kind, cell, steps = data
    return (kind, cell, tuple((k, int(i)) for k, i in steps))


# ------------------------------------------------------------------- server


@dataclass
class WorkerRecord:
    worker_id: str
    address: str = ""
    status: str = "running"     # running | crashed | recovering | resumed
    signature: tuple | None = None
    role: str = ""              # fix-host | wait | replay, while crashed
    transitions: list = field(default_factory=list)

    def move(self, status: str) -> None:
        self.transitions.append((self.status, status))
        self.status = status

    def to_json(self) -> dict:
        return {"id": self.worker_id, "status": self.status,
                "signature": _signature_json(self.signature)
                if self.signature else None}


class Coordinator:
    """Rendezvous server: crash announcements in, fix broadcasts out."""

    def __init__(self, bind: str = "127.0.0.1:0"):
        host, _, port = bind.rpartition(":")
        self._listener = socket.create_server((host or "127.0.0.1", int(port)))
        self.host, self.port = self._listener.getsockname()[:2]
        self.address = f"{self.host}:{self.port}"
        self.workers: dict[str, WorkerRecord] = {}
        self.fix_hosts: dict[str, str] = {}          # signature key -> worker
        self.procedures: dict[str, FixProcedure] = {}
        self.reports: list[dict] = []
        # worker id -> (socket, per-socket write lock); replies from the
        # worker's own serving thread and broadcasts from another worker's
        # thread must not interleave frames
        self._conns: dict[str, tuple] = {}
        self._lock = threading.RLock()
        self._closed = False

    def start(self) -> "Coordinator":
        threading.Thread(target=self._accept_loop,
                         name=f"isr-coord-{self.port}", daemon=True).start()
        return self

    def close(self) -> None:
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for conn, _wlock in self._conns.values():
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                try:
                    conn.close()
                except OSError:
                    pass
            self._conns.clear()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_conn, args=(conn, addr),
                             daemon=True).start()

    def _serve_conn(self, conn: socket.socket, addr) -> None:
        worker_id = None
        wlock = threading.Lock()

        def reply(message: dict) -> None:
            with wlock:
                send_message(conn, message)

        while not self._closed:
            try:
                msg = recv_message(conn)
            except (ValueError, OSError):
                break
            if msg is None:
                break
            kind = msg.get("kind")
            if kind == "HELLO":
                worker_id = msg["worker"]
                self._register(worker_id, f"{addr[0]}:{addr[1]}", conn, wlock)
                reply({"kind": "ACK", "ok": True})
            elif kind == "CRASH":
                worker_id = msg["worker"]
                self._register(worker_id, f"{addr[0]}:{addr[1]}", conn, wlock)
                signature = _signature_from_json(msg["signature"])
                role, cached = self._announce(worker_id, signature,
                                              msg.get("can_host", True))
                reply({"kind": "ACK", "ok": True, "role": role})
                if cached is not None:
                    reply({"kind": "FIX",
                           "signature": _signature_json(signature),
                           "procedure": cached.to_json()})
                    with self._lock:
                        self.workers[worker_id].move("recovering")
            elif kind == "FIX":
                report = self._broadcast(
                    msg["worker"], _signature_from_json(msg["signature"]),
                    FixProcedure.from_json(msg["procedure"]))
                reply({"kind": "ACK", "ok": True, "report": report})
            elif kind == "RESUME":
                self._resumed(msg["worker"], msg.get("outcome", "resumed"))
                reply({"kind": "ACK", "ok": True})
            elif kind == "STATUS":
                with self._lock:
                    body = [w.to_json() for w in self.workers.values()]
                reply({"kind": "STATUS", "workers": body})
            else:
                reply({"kind": "ACK", "ok": False,
                       "error": f"unknown kind {kind!r}"})
        if worker_id is not None:
            with self._lock:
                self._conns.pop(worker_id, None)
        try:
            conn.close()
        except OSError:
            pass

    def _register(self, worker_id: str, address: str, conn: socket.socket,
                  wlock) -> None:
        with self._lock:
            rec = self.workers.get(worker_id)
            if rec is None:
                rec = WorkerRecord(worker_id, address)
                self.workers[worker_id] = rec
            rec.address = address
            self._conns[worker_id] = (conn, wlock)

    def _announce(self, worker_id: str, signature: tuple,
                  can_host: bool) -> tuple[str, FixProcedure | None]:
        key = signature_key(signature)
        with self._lock:
            rec = self.workers[worker_id]
            if rec.signature == signature and rec.status in ("crashed",
                                                             "recovering"):
                # duplicate announce: answer with the role already assigned
                return rec.role or "wait", None
            rec.signature = signature
            rec.move("crashed")
            cached = self.procedures.get(key)
            if cached is not None:
                # the fault was already fixed once; skip the operator.
                # checked before the host slot: the slot stays held for a
                # moment after the broadcast, and an announce landing in
                # that window must not wait for a fix already sent
                rec.role = "replay"
                return "replay", cached
            if key in self.fix_hosts:
                rec.role = "wait"
                return "wait", None
            if not can_host:
                # no source of its own: park it until a capable worker
                # announces, whatever order the crashes land in
                rec.role = "wait"
                return "wait", None
            self.fix_hosts[key] = worker_id
            rec.move("recovering")
            rec.role = "fix-host"
            return "fix-host", None

    def _broadcast(self, sender: str, signature: tuple,
                   procedure: FixProcedure) -> dict:
        key = signature_key(signature)
        delivered, skipped, failed = [], [], []
        with self._lock:
            self.procedures[key] = procedure
            targets = [w for w in self.workers.values()
                       if w.worker_id != sender and w.status == "crashed"]
        for rec in targets:
            if rec.signature != signature:
                skipped.append(rec.worker_id)
                continue
            with self._lock:
                entry = self._conns.get(rec.worker_id)
            if entry is None:
                failed.append(rec.worker_id)
                continue
            conn, wlock = entry
            try:
                with wlock:
                    send_message(conn, {
                        "kind": "FIX",
                        "signature": _signature_json(signature),
                        "procedure": procedure.to_json(),
                    })
            except OSError:
                failed.append(rec.worker_id)
                continue
            with self._lock:
                rec.move("recovering")
            delivered.append(rec.worker_id)
        report = {"delivered": delivered, "skipped": skipped, "failed": failed}
        with self._lock:
            self.reports.append(report)
        return report

    def _resumed(self, worker_id: str, outcome: str) -> None:
        with self._lock:
            rec = self.workers.get(worker_id)
            if rec is None:
                return
            if outcome == "resumed":
                rec.move("resumed")
                rec.move("running")
            key = signature_key(rec.signature) if rec.signature else None
            role, rec.signature, rec.role = rec.role, None, ""
            if key is None:
                return
            if outcome != "resumed":
                if self.fix_hosts.get(key) == worker_id:
                    # aborted host: free the slot for a future crasher
                    self.fix_hosts.pop(key, None)
                if role == "replay":
                    # the cached procedure failed this worker; stop
                    # serving it to the next one
                    self.procedures.pop(key, None)
            if key in self.fix_hosts:
                # free the host slot once no session is pending on this
                # signature, whatever order host and waiters finish in
                still_waiting = any(
                    w.signature and signature_key(w.signature) == key
                    for w in self.workers.values())
                if not still_waiting:
                    self.fix_hosts.pop(key, None)


def serve(bind: str, forever: bool = True) -> Coordinator:
    coord = Coordinator(bind).start()
    print(f"coordinator listening on {coord.address}", flush=True)
    if forever:
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            coord.close()
    return coord


# ------------------------------------------------------------------- client


class CoordinatorClient:
    """One worker's persistent connection to the coordinator."""

    def __init__(self, address: str, worker_id: str):
        host, _, port = address.rpartition(":")
        self.worker_id = worker_id
        self._sock = socket.create_connection((host, int(port)), timeout=10)
        self._sock.settimeout(None)
        self._replies: deque = deque()
        self._reply_ready = threading.Condition()
        self._fixes: deque = deque()
        self._send_lock = threading.Lock()
        self._closed = False
        threading.Thread(target=self._read_loop, daemon=True).start()
        self._request({"kind": "HELLO", "worker": worker_id})

    def close(self) -> None:
        self._closed = True
        # the read loop holds the socket in recv(); a bare close() would
        # leave the description open (no FIN) until that thread dies
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass

    def _read_loop(self) -> None:
        while not self._closed:
            try:
                msg = recv_message(self._sock)
            except (ValueError, OSError):
                msg = None
            if msg is None:
                break
            if msg.get("kind") == "FIX":
                with self._reply_ready:
                    self._fixes.append(msg)
                    self._reply_ready.notify_all()
            else:
                with self._reply_ready:
                    self._replies.append(msg)
                    self._reply_ready.notify_all()

    def _request(self, message: dict, timeout: float = 10.0) -> dict:
        with self._send_lock:
            send_message(self._sock, message)
            with self._reply_ready:
                deadline = time.monotonic() + timeout
                while not self._replies:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TimeoutError(
                            f"coordinator did not answer {message['kind']}")
                    self._reply_ready.wait(remaining)
                return self._replies.popleft()

    def announce(self, signature: tuple, can_host: bool = True) -> str:
        ack = self._request({"kind": "CRASH", "worker": self.worker_id,
                             "signature": _signature_json(signature),
                             "can_host": can_host})
        return ack.get("role", "wait")

    def send_fix(self, signature: tuple, procedure: FixProcedure) -> dict:
        ack = self._request({"kind": "FIX", "worker": self.worker_id,
                             "signature": _signature_json(signature),
                             "procedure": procedure.to_json()})
        return ack.get("report", {})

    def send_resumed(self, outcome: str) -> None:
        self._request({"kind": "RESUME", "worker": self.worker_id,
                       "outcome": outcome})

    def status(self) -> list[dict]:
        reply = self._request({"kind": "STATUS"})
        return reply.get("workers", [])

    def wait_fix(self, signature: tuple, timeout: float) -> FixProcedure | None:
        want = _signature_json(signature)
        deadline = time.monotonic() + timeout
        with self._reply_ready:
            while True:
                for i, msg in enumerate(self._fixes):
                    if msg["signature"] == want:
                        del self._fixes[i]
                        return FixProcedure.from_json(msg["procedure"])
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._reply_ready.wait(remaining)


_clients: dict[tuple, CoordinatorClient] = {}
_clients_lock = threading.Lock()


def _shared_client(address: str, worker_id: str) -> CoordinatorClient:
    key = (address, worker_id)
    with _clients_lock:
        client = _clients.get(key)
        if client is None or client._closed:
            client = CoordinatorClient(address, worker_id)
            _clients[key] = client
        return client


class CoordinatedSource(CommandSource):
    """Wraps another source with coordinator rendezvous.

    The first worker to announce a signature keeps its inner source (the
    actual operator dialogue); everyone else waits for that worker's
    recorded procedure and replays it.
    """

    def __init__(self, inner: CommandSource | None = None,
                 address: str | None = None, worker_id: str | None = None,
                 timeout: float | None = None):
        self.inner = inner
        self.address = address or os.environ.get(ADDRESS_VAR, "")
        self.worker_id = worker_id or os.environ.get(WORKER_VAR) \
            or f"pid{os.getpid()}"
        if timeout is None:
            raw = os.environ.get(TIMEOUT_VAR)
            timeout = float(raw) if raw else DEFAULT_TIMEOUT
        self.timeout = timeout
        self.role = "wait"
        self._pending: deque = deque()
        self._client: CoordinatorClient | None = None

    def begin(self, event) -> None:
        self._client = _shared_client(self.address, self.worker_id)
        self.role = self._client.announce(event.signature,
                                          can_host=self.inner is not None)
        self._pending.clear()
        if self.role == "fix-host" and self.inner is not None:
            self.inner.begin(event)

    def next_command(self, event) -> RecoveryCommand | None:
        if self.role == "fix-host":
            if self.inner is None:
                return None
            return self.inner.next_command(event)
        if not self._pending:
            fix = self._client.wait_fix(event.signature, self.timeout)
            if fix is None:
                return None
            self._pending.extend(fix.commands)
        return self._pending.popleft() if self._pending else None

    def report(self, event, command, ok, detail) -> None:
        if self.role == "fix-host" and self.inner is not None:
            self.inner.report(event, command, ok, detail)

    def end(self, event, resumed) -> None:
        if self.role == "fix-host":
            if self.inner is not None:
                self.inner.end(event, resumed)
            fix = event.activation.last_fix
            if resumed and fix is not None:
                self._client.send_fix(event.signature, fix)
        self._client.send_resumed("resumed" if resumed else "failed")
