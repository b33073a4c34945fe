"""The wall-clock runtime against real loopback sockets.

These tests use the kernel's clock and network stack, so they assert
behavior and ordering, not exact timings.
"""

import socket
import time

import pytest

from nc2s import artifacts, nodes, policy, runtime
from nc2s.artifacts import NodeIdentity, Role


def drive(engine, pred, timeout_s=5.0):
    """Poll the engine until pred() holds or the wall budget runs out."""
    deadline = time.time() + timeout_s
    while time.time() < deadline:
        engine.poll(0.02)
        if pred():
            return True
    return False


@pytest.fixture
def engine():
    eng = runtime.LiveEngine()
    yield eng
    eng.close()


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# --- engine -----------------------------------------------------------------


def test_timers_fire_in_order(engine):
    fired = []
    engine.after_ms(30, lambda: fired.append("late"))
    engine.after_ms(5, lambda: fired.append("early"))
    killed = engine.after_ms(10, lambda: fired.append("cancelled"))
    killed.cancel()
    assert drive(engine, lambda: len(fired) == 2, 2.0)
    assert fired == ["early", "late"]


def test_now_is_epoch_microseconds(engine):
    span = abs(engine.now_us - time.time_ns() // 1000)
    assert span < 1_000_000
    assert engine.now_ms() == pytest.approx(engine.now_us // 1000, abs=2000)


def test_call_soon_runs_on_next_poll(engine):
    hits = []
    engine.call_soon(lambda: hits.append(1))
    engine.poll(0.0)
    assert hits == [1]


# --- UDP --------------------------------------------------------------------


def test_udp_round_trip(engine):
    a = runtime.LiveHost(engine, "127.0.0.1")
    b = runtime.LiveHost(engine, "127.0.0.1")
    pa, pb = free_port(), free_port()
    got = []
    sa = a.bind_udp(pa, lambda data, src, meta: got.append((data, src)))
    sb = b.bind_udp(pb, None)
    assert sa.port == pa
    sb.sendto(b"ping", ("127.0.0.1", pa))
    assert drive(engine, lambda: got, 2.0)
    data, src = got[0]
    assert data == b"ping" and src[0] == "127.0.0.1" and src[1] == pb
    sa.close()
    sb.close()


def test_udp_send_to_dead_port_is_silent(engine):
    host = runtime.LiveHost(engine, "127.0.0.1")
    sock = host.bind_udp(free_port(), None)
    sock.sendto(b"void", ("127.0.0.1", 1))
    sock.sendto(b"void", ("127.0.0.1", 1))
    engine.poll(0.0)
    sock.close()


def test_bind_on_foreign_address_names_loopback_fix(engine):
    host = runtime.LiveHost(engine, "203.0.113.7")
    with pytest.raises(OSError, match="loopback"):
        host.bind_udp(free_port(), None)


# --- TCP streams ------------------------------------------------------------


def test_stream_open_exchange_close(engine):
    host = runtime.LiveHost(engine, "127.0.0.1")
    port = free_port()
    server_got, client_got, closes = [], [], []
    accepted = []

    def on_accept(conn):
        accepted.append(conn)
        conn.on_data = server_got.append
        conn.on_close = lambda c, reason: closes.append(("server", reason))
        conn.send(b"hello from server")

    listener = host.listen_stream(port, on_accept)
    assert listener.port == port
    conn = host.connect_stream(
        ("127.0.0.1", port),
        on_open=lambda c: c.send(b"hello from client"),
        on_data=client_got.append,
        on_close=lambda c, reason: closes.append(("client", reason)))

    assert drive(engine, lambda: server_got and client_got, 2.0)
    assert b"".join(server_got) == b"hello from client"
    assert b"".join(client_got) == b"hello from server"
    assert conn.state == "open" and accepted[0].state == "open"
    assert accepted[0].peer[0] == "127.0.0.1"

    conn.close()
    assert drive(engine, lambda: len(closes) == 2, 2.0)
    assert ("client", "closed") in closes
    assert ("server", "fin") in closes
    listener.close()


def test_stream_send_before_open_is_buffered(engine):
    host = runtime.LiveHost(engine, "127.0.0.1")
    port = free_port()
    got = []
    listener = host.listen_stream(
        port, lambda c: setattr(c, "on_data", got.append))
    conn = host.connect_stream(("127.0.0.1", port))
    conn.send(b"early")
    assert drive(engine, lambda: got, 2.0)
    assert b"".join(got) == b"early"
    conn.close()
    listener.close()


def test_connect_refused_reports_close(engine):
    host = runtime.LiveHost(engine, "127.0.0.1")
    closes = []
    conn = host.connect_stream(
        ("127.0.0.1", free_port()),
        on_close=lambda c, reason: closes.append(reason))
    assert drive(engine, lambda: closes, 2.0)
    assert closes == ["closed"] and conn.state == "closed"


def test_large_transfer_survives_chunking(engine):
    host = runtime.LiveHost(engine, "127.0.0.1")
    port = free_port()
    blob = bytes(range(256)) * 2048  # 512 KiB
    got = []
    listener = host.listen_stream(
        port, lambda c: setattr(c, "on_data", got.append))
    conn = host.connect_stream(("127.0.0.1", port),
                               on_open=lambda c: c.send(blob))
    assert drive(engine, lambda: sum(len(b) for b in got) == len(blob), 5.0)
    assert b"".join(got) == blob
    conn.close()
    listener.close()


# --- full node establishment over loopback ----------------------------------


def test_two_nodes_establish_and_pass_traffic(engine):
    epoch = int(time.time() * 1000)
    identities = [NodeIdentity("TC1", "127.0.0.1", Role.CT1),
                  NodeIdentity("GCS1", "127.0.0.2", Role.GCS)]
    mission = artifacts.generate_mission(
        identities, policy.default_policy_doc(), seed=11, epoch_ms=epoch)

    events = []

    def sink(node, name, t, fields):
        events.append((node, name, dict(fields)))

    def ca_signer(serials, validity):
        return artifacts.build_certrl(mission.ca_key, serials, validity)

    built = {}
    for cn, bundle in mission.bundles.items():
        host = runtime.LiveHost(engine, bundle.identity.ip_address)
        kw = {"ca_signer": ca_signer} if bundle.identity.role is Role.CT1 else {}
        built[cn] = nodes.make_node(bundle, host, engine, seed=1,
                                    event_sink=sink, **kw)
    for node in built.values():
        node.start()

    result = built["TC1"].ct1_command(
        {"cmd": "NewConnection", "client": "TC1", "server": "GCS1"})
    assert result["ok"], result

    def both_up():
        ups = {n for n, name, f in events if name == "SessionUp"}
        return ups == {"TC1", "GCS1"}

    assert drive(engine, both_up, 8.0)
    failures = [(n, name, f) for n, name, f in events
                if name in ("EstFailed", "MsgDropped")]
    assert failures == []
    assert built["TC1"].sessions["GCS1"].state.peer.common_name == "GCS1"
    assert built["GCS1"].sessions["TC1"].state.is_client is False
