"""Crash rendezvous: announce, fix-host designation, broadcast, replay."""

import socket
import textwrap
import threading
import time

import pytest

from insitu import FixProcedure, QueueSource, RecoveryCommand, RecoveryOptions
from insitu.coordinator import (
    Coordinator,
    CoordinatorClient,
    CoordinatedSource,
    _signature_json,
    recv_message,
    send_message,
    signature_key,
)
from insitu.vaccinate import vaccinate_source

_SEQ = iter(range(10_000))

ALLOWED_MOVES = {
    ("running", "crashed"),
    ("crashed", "recovering"),
    ("recovering", "resumed"),
    ("resumed", "running"),
}

SIG_A = ("NameError", "c1", (("loop-body", 1),))
SIG_B = ("KeyError", "c1", (("loop-body", 2),))

CHARGE_SRC = """
def charge(xs):
    total = 0.0
    for x in xs:
        total += x * rate
    return total
"""


def make_program(name_suffix, src=CHARGE_SRC, name="charge", **kw):
    return vaccinate_source(textwrap.dedent(src), name, {},
                            program_id=f"tw{name_suffix}{next(_SEQ)}", **kw)


@pytest.fixture()
def coord():
    c = Coordinator("127.0.0.1:0").start()
    yield c
    c.close()


def fix_a():
    return FixProcedure(commands=[RecoveryCommand("pass")],
                        exception_kind="NameError")


# ---------------------------------------------------------------- transport


def test_message_framing_round_trip():
    a, b = socket.socketpair()
    try:
        msg = {"kind": "HELLO", "worker": "w1", "blob": "x" * 70_000}
        send_message(a, msg)
        got = recv_message(b)
        assert got == {"v": 1, **msg}
    finally:
        a.close()
        b.close()


def test_message_length_cap():
    a, b = socket.socketpair()
    try:
        a.sendall((1 << 31).to_bytes(4, "big") + b"xx")
        with pytest.raises(ValueError, match="cap"):
            recv_message(b)
    finally:
        a.close()
        b.close()


def test_signature_key_is_stable_and_distinct():
    assert signature_key(SIG_A) == signature_key(
        ("NameError", "c1", (("loop-body", 1),)))
    assert signature_key(SIG_A) != signature_key(SIG_B)


# ------------------------------------------------------------- server logic


def test_first_announcer_becomes_fix_host(coord):
    w1 = CoordinatorClient(coord.address, "w1")
    w2 = CoordinatorClient(coord.address, "w2")
    try:
        assert w1.announce(SIG_A) == "fix-host"
        assert w2.announce(SIG_A) == "wait"
        # duplicate announces answer identically, no reshuffling
        assert w1.announce(SIG_A) == "fix-host"
        assert w2.announce(SIG_A) == "wait"
    finally:
        w1.close()
        w2.close()


def test_each_signature_gets_its_own_fix_host(coord):
    w1 = CoordinatorClient(coord.address, "w1")
    w2 = CoordinatorClient(coord.address, "w2")
    try:
        assert w1.announce(SIG_A) == "fix-host"
        assert w2.announce(SIG_B) == "fix-host"
    finally:
        w1.close()
        w2.close()


def test_announce_registers_unknown_workers(coord):
    # a bare CRASH, no HELLO first: the worker is registered on the fly
    sock = socket.create_connection((coord.host, coord.port), timeout=5)
    try:
        send_message(sock, {"kind": "CRASH", "worker": "w9",
                            "signature": _signature_json(SIG_A)})
        ack = recv_message(sock)
        assert ack["ok"] is True and ack["role"] == "fix-host"
        assert coord.workers["w9"].status == "recovering"
    finally:
        sock.close()


def test_broadcast_routes_by_signature(coord):
    host_a = CoordinatorClient(coord.address, "host_a")
    wait_a = CoordinatorClient(coord.address, "wait_a")
    wait_b = CoordinatorClient(coord.address, "wait_b")
    host_b = CoordinatorClient(coord.address, "host_b")
    try:
        assert host_a.announce(SIG_A) == "fix-host"
        assert wait_a.announce(SIG_A) == "wait"
        assert host_b.announce(SIG_B) == "fix-host"
        assert wait_b.announce(SIG_B) == "wait"

        report = host_a.send_fix(SIG_A, fix_a())
        assert report["delivered"] == ["wait_a"]
        assert report["skipped"] == ["wait_b"]  # crashed, different fault
        assert report["failed"] == []

        got = wait_a.wait_fix(SIG_A, timeout=5)
        assert got is not None
        assert [c.kind for c in got.commands] == ["pass"]
        assert wait_b.wait_fix(SIG_B, timeout=0.2) is None  # not for them
    finally:
        for c in (host_a, wait_a, wait_b, host_b):
            c.close()


def test_broadcast_marks_unreachable_workers_failed(coord):
    host = CoordinatorClient(coord.address, "host")
    gone = CoordinatorClient(coord.address, "gone")
    try:
        assert host.announce(SIG_A) == "fix-host"
        assert gone.announce(SIG_A) == "wait"
        gone.close()
        deadline = time.monotonic() + 5
        while "gone" in coord._conns and time.monotonic() < deadline:
            time.sleep(0.01)
        report = host.send_fix(SIG_A, fix_a())
        assert report["failed"] == ["gone"]
        assert report["delivered"] == []
    finally:
        host.close()


def test_status_lists_workers(coord):
    w1 = CoordinatorClient(coord.address, "w1")
    w2 = CoordinatorClient(coord.address, "w2")
    try:
        w1.announce(SIG_A)
        listing = {w["id"]: w for w in w2.status()}
        assert listing["w1"]["status"] == "recovering"
        assert listing["w2"]["status"] == "running"
        assert listing["w1"]["signature"][0] == "NameError"
    finally:
        w1.close()
        w2.close()


def test_failed_replay_invalidates_the_cache(coord):
    host = CoordinatorClient(coord.address, "host")
    late = CoordinatorClient(coord.address, "late")
    fresh = CoordinatorClient(coord.address, "fresh")
    try:
        assert host.announce(SIG_A) == "fix-host"
        host.send_fix(SIG_A, fix_a())
        host.send_resumed("resumed")
        assert late.announce(SIG_A, can_host=False) == "replay"
        assert late.wait_fix(SIG_A, timeout=5) is not None
        late.send_resumed("failed")  # the recipe did not work here
        assert signature_key(SIG_A) not in coord.procedures
        # the next crasher starts a fresh operator session
        assert fresh.announce(SIG_A) == "fix-host"
    finally:
        for c in (host, late, fresh):
            c.close()


def test_aborted_host_frees_the_slot(coord):
    quitter = CoordinatorClient(coord.address, "quitter")
    second = CoordinatorClient(coord.address, "second")
    try:
        assert quitter.announce(SIG_A) == "fix-host"
        quitter.send_resumed("failed")
        assert signature_key(SIG_A) not in coord.fix_hosts
        assert second.announce(SIG_A) == "fix-host"
    finally:
        quitter.close()
        second.close()


def test_resume_completes_the_status_cycle(coord):
    w1 = CoordinatorClient(coord.address, "w1")
    try:
        w1.announce(SIG_A)
        w1.send_resumed("resumed")
        rec = coord.workers["w1"]
        assert rec.status == "running"
        assert set(rec.transitions) <= ALLOWED_MOVES
        # the signature's fix slot is free again for a future crash
        assert signature_key(SIG_A) not in coord.fix_hosts
    finally:
        w1.close()


def test_unknown_message_kind_is_answered_not_fatal(coord):
    w1 = CoordinatorClient(coord.address, "w1")
    try:
        nack = w1._request({"kind": "REBOOT", "worker": "w1"})
        assert nack["ok"] is False and "unknown kind" in nack["error"]
        assert w1.announce(SIG_A) == "fix-host"  # connection still fine
    finally:
        w1.close()


# --------------------------------------------------------------- end to end


def _run_worker(prog, args, box, key):
    try:
        box[key] = prog.entry(*args)
    except BaseException as exc:  # noqa: BLE001
        box[key] = exc


def test_fix_host_heals_and_waiters_replay(coord):
    # same program source in two processes' stead: two programs with
    # independent globals crash identically; only the host has an operator
    host_inner = QueueSource(timeout=10.0)
    host_prog = make_program("host", options=RecoveryOptions(
        source=CoordinatedSource(inner=host_inner, address=coord.address,
                                 worker_id="host"),
        interactive="never"))
    waiter_prog = make_program("waiter", options=RecoveryOptions(
        source=CoordinatedSource(inner=None, address=coord.address,
                                 worker_id="waiter", timeout=20.0),
        interactive="never"))

    box = {}
    host_t = threading.Thread(
        target=_run_worker, args=(host_prog, ([1, 2, 3],), box, "host"),
        daemon=True)
    host_t.start()
    deadline = time.monotonic() + 5
    while coord.workers.get("host") is None or \
            coord.workers["host"].status != "recovering":
        assert time.monotonic() < deadline, "host never announced"
        time.sleep(0.01)

    waiter_t = threading.Thread(
        target=_run_worker, args=(waiter_prog, ([4, 5],), box, "waiter"),
        daemon=True)
    waiter_t.start()
    while coord.workers.get("waiter") is None or \
            coord.workers["waiter"].status != "crashed":
        assert time.monotonic() < deadline, "waiter never announced"
        time.sleep(0.01)

    # operator fixes the host; the recorded procedure heals the waiter
    host_inner.push(RecoveryCommand("action", "rate = 2.0"))
    host_inner.push(RecoveryCommand("pass"))

    host_t.join(timeout=15)
    waiter_t.join(timeout=15)
    assert box.get("host") == 12.0
    assert box.get("waiter") == 18.0
    assert coord.reports and coord.reports[-1]["delivered"] == ["waiter"]
    for rec in coord.workers.values():
        assert rec.status == "running"
        assert set(rec.transitions) <= ALLOWED_MOVES
    assert coord.fix_hosts == {}  # slot freed once the last session closed


def test_sourceless_worker_waits_even_when_it_crashes_first(coord):
    # fleet worker with no operator dialogue crashes before the one that
    # has one; it must park as a waiter, not claim the host slot
    waiter_prog = make_program("early", options=RecoveryOptions(
        source=CoordinatedSource(inner=None, address=coord.address,
                                 worker_id="early", timeout=20.0),
        interactive="never"))
    box = {}
    waiter_t = threading.Thread(
        target=_run_worker, args=(waiter_prog, ([7],), box, "waiter"),
        daemon=True)
    waiter_t.start()
    deadline = time.monotonic() + 5
    while coord.workers.get("early") is None or \
            coord.workers["early"].status != "crashed":
        assert time.monotonic() < deadline, "waiter never announced"
        time.sleep(0.01)
    assert not coord.fix_hosts  # the slot is still open

    host_inner = QueueSource(timeout=10.0)
    host_prog = make_program("tardyhost", options=RecoveryOptions(
        source=CoordinatedSource(inner=host_inner, address=coord.address,
                                 worker_id="tardyhost"),
        interactive="never"))
    host_t = threading.Thread(
        target=_run_worker, args=(host_prog, ([1, 2],), box, "host"),
        daemon=True)
    host_t.start()
    while coord.workers.get("tardyhost") is None or \
            coord.workers["tardyhost"].status != "recovering":
        assert time.monotonic() < deadline, "host never announced"
        time.sleep(0.01)
    host_inner.push(RecoveryCommand("action", "rate = 2.0"))
    host_inner.push(RecoveryCommand("pass"))
    host_t.join(timeout=15)
    waiter_t.join(timeout=15)
    assert box.get("host") == 6.0
    assert box.get("waiter") == 14.0
    assert coord.reports[-1]["delivered"] == ["early"]


def test_late_crasher_replays_the_cached_procedure(coord):
    host_inner = QueueSource(timeout=10.0)
    host_prog = make_program("cachehost", options=RecoveryOptions(
        source=CoordinatedSource(inner=host_inner, address=coord.address,
                                 worker_id="cachehost"),
        interactive="never"))
    box = {}
    host_t = threading.Thread(
        target=_run_worker, args=(host_prog, ([1, 2, 3],), box, "host"),
        daemon=True)
    host_t.start()
    deadline = time.monotonic() + 5
    while coord.workers.get("cachehost") is None or \
            coord.workers["cachehost"].status != "recovering":
        assert time.monotonic() < deadline
        time.sleep(0.01)
    host_inner.push(RecoveryCommand("action", "rate = 2.0"))
    host_inner.push(RecoveryCommand("pass"))
    host_t.join(timeout=15)
    assert box.get("host") == 12.0

    # nobody else was crashed, so the broadcast reached no one; a worker
    # hitting the same fault afterwards is healed straight from the cache
    assert coord.reports[-1]["delivered"] == []
    late_prog = make_program("late", options=RecoveryOptions(
        source=CoordinatedSource(inner=None, address=coord.address,
                                 worker_id="late", timeout=10.0),
        interactive="never"))
    assert late_prog.entry([10]) == 20.0
    assert coord.workers["late"].status == "running"
    assert set(coord.workers["late"].transitions) <= ALLOWED_MOVES


def test_waiter_times_out_when_no_fix_arrives(coord):
    host_inner = QueueSource(timeout=10.0)
    host_prog = make_program("slowhost", options=RecoveryOptions(
        source=CoordinatedSource(inner=host_inner, address=coord.address,
                                 worker_id="slowhost"),
        interactive="never"))
    waiter_prog = make_program("hastywaiter", options=RecoveryOptions(
        source=CoordinatedSource(inner=None, address=coord.address,
                                 worker_id="hastywaiter", timeout=0.3),
        interactive="never"))

    box = {}
    host_t = threading.Thread(
        target=_run_worker, args=(host_prog, ([1],), box, "host"), daemon=True)
    host_t.start()
    deadline = time.monotonic() + 5
    while coord.workers.get("slowhost") is None or \
            coord.workers["slowhost"].status != "recovering":
        assert time.monotonic() < deadline
        time.sleep(0.01)

    waiter_t = threading.Thread(
        target=_run_worker, args=(waiter_prog, ([2],), box, "waiter"),
        daemon=True)
    waiter_t.start()
    waiter_t.join(timeout=10)
    assert isinstance(box.get("waiter"), NameError)  # gave up, crash surfaced

    host_inner.push(RecoveryCommand("abort", None))
    host_t.join(timeout=10)


def test_env_variable_wires_the_coordinator_in(coord, monkeypatch):
    from insitu import recovery_source

    monkeypatch.setenv("INSITU_COORD", coord.address)
    monkeypatch.setenv("INSITU_WORKER_ID", "envworker")
    prog = make_program("env")
    with recovery_source(FixProcedure(
            commands=[RecoveryCommand("action", "rate = 1.5"),
                      RecoveryCommand("pass")])):
        assert prog.entry([2, 4]) == 9.0
    assert coord.workers["envworker"].status == "running"
