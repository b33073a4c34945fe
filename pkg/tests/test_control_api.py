"""The control endpoint, driven entirely inside the virtual network."""

import json
from dataclasses import replace

import pytest

from nc2s import artifacts, control_api, emulator as em, nodes, policy
from nc2s.artifacts import NodeIdentity, Role

EPOCH = artifacts.DETERMINISTIC_EPOCH_MS
WIFI0 = replace(em.WIFI, loss_rate=0.0)

# RFC 6455's worked example: this key must map to this accept token.
SAMPLE_KEY = "dGhlIHNhbXBsZSBub25jZQ=="
SAMPLE_ACCEPT = "s3pPLMBiTxaQ9kYGzzhZRbK+xOo="


def mask_frame(opcode: int, payload: bytes, mask=b"\x0a\x0b\x0c\x0d") -> bytes:
    body = bytes(b ^ mask[i & 3] for i, b in enumerate(payload))
    n = len(payload)
    if n < 126:
        head = bytes([0x80 | opcode, 0x80 | n])
    else:
        head = bytes([0x80 | opcode, 0x80 | 126]) + n.to_bytes(2, "big")
    return head + mask + body


def server_frames(buf: bytes) -> tuple[list[tuple[int, bytes]], bytes]:
    out = []
    while len(buf) >= 2:
        opcode, n, off = buf[0] & 0xF, buf[1] & 0x7F, 2
        if n == 126:
            if len(buf) < 4:
                break
            n, off = int.from_bytes(buf[2:4], "big"), 4
        if len(buf) < off + n:
            break
        out.append((opcode, buf[off:off + n]))
        buf = buf[off + n:]
    return out, buf


class World:
    """Three-node mission plus an operator host wired to TC1's endpoint."""

    def __init__(self, tmp_assets=None):
        self.engine = em.EventEngine(start_ms=EPOCH)
        self.net = em.VirtualNetwork(self.engine, seed=5)
        identities = [NodeIdentity("TC1", "10.0.0.1", Role.CT1),
                      NodeIdentity("GCS1", "10.0.0.2", Role.GCS),
                      NodeIdentity("UXV1", "10.0.0.3", Role.UXV)]
        self.mission = artifacts.generate_mission(
            identities, policy.default_policy_doc(), seed=5)
        self.hosts = {i.common_name: self.net.add_host(i.common_name,
                                                       i.ip_address)
                      for i in identities}
        self.op = self.net.add_host("OP", "10.0.0.9")
        self.net.connect("10.0.0.1", "10.0.0.2", WIFI0)
        self.net.connect("10.0.0.2", "10.0.0.3", WIFI0)
        self.net.connect("10.0.0.9", "10.0.0.1", em.LOOP)
        self.net.connect("10.0.0.9", "10.0.0.2", em.LOOP)

        api_holder = []

        def tee(node, name, t, fields):
            if api_holder:
                api_holder[0].sink(node, name, t, fields)

        def ca_signer(serials, validity):
            return artifacts.build_certrl(self.mission.ca_key, serials,
                                          validity)

        self.nodes = {}
        for cn in ("TC1", "GCS1", "UXV1"):
            kw = ({"ca_signer": ca_signer, "event_sink": tee}
                  if cn == "TC1" else {})
            self.nodes[cn] = nodes.make_node(self.mission.bundles[cn],
                                             self.hosts[cn], self.engine,
                                             seed=5, **kw)
        self.api = control_api.ControlServer(
            self.engine, self.nodes["TC1"], self.hosts["TC1"], port=50000,
            assets_dir=tmp_assets)
        api_holder.append(self.api)
        for node in self.nodes.values():
            node.start()

    def client(self, port=50000, ip="10.0.0.1"):
        raw = bytearray()
        conn = self.op.connect_stream((ip, port), None, raw.extend, None)
        self.engine.run_for_ms(50)
        return conn, raw

    def docs(self, raw: bytearray) -> list[dict]:
        return [json.loads(line) for line in bytes(raw).split(b"\n") if line]


@pytest.fixture
def world():
    return World()


# --- NDJSON mode ------------------------------------------------------------


def test_command_ack_echoes_ref_and_runs(world):
    conn, raw = world.client()
    conn.send(b'{"cmd":"NewConnection","client":"TC1","server":"GCS1",'
              b'"ref":"r7"}\n')
    world.engine.run_for_ms(2000)
    docs = world.docs(raw)
    ack = next(d for d in docs if d["event"] == "CmdAck")
    assert ack["ok"] is True and ack["ref"] == "r7" and ack["cid"] == 1
    assert any(d["event"] == "SessionUp" and d["peer"] == "GCS1"
               for d in docs)


def test_snapshot_reflects_sessions_and_map(world):
    conn, raw = world.client()
    conn.send(b'{"cmd":"Snapshot","ref":"s0"}\n')
    world.engine.run_for_ms(100)
    empty = next(d for d in world.docs(raw) if d["event"] == "Snapshot")
    assert empty["sessions"] == [] and empty["map"] == []
    assert empty["node"] == "TC1" and empty["role"] == "ct1"
    assert empty["read_only"] is False

    conn.send(b'{"cmd":"NewConnection","client":"TC1","server":"GCS1"}\n')
    world.engine.run_for_ms(2000)
    conn.send(b'{"cmd":"NewConnection","client":"GCS1","server":"UXV1"}\n')
    world.engine.run_for_ms(8000)
    conn.send(b'{"cmd":"Snapshot","ref":"s1"}\n')
    world.engine.run_for_ms(100)
    snap = [d for d in world.docs(raw) if d["event"] == "Snapshot"][-1]
    assert [(s["peer"], s["phase"], s["client"]) for s in snap["sessions"]] \
        == [("GCS1", "Established", True)]
    assert snap["map"] == [{"uxv": "UXV1", "gcs": "GCS1",
                            "last_seen_ms": snap["map"][0]["last_seen_ms"]}]


def test_map_updates_broadcast_with_entries(world):
    conn, raw = world.client()
    conn.send(b'{"cmd":"NewConnection","client":"TC1","server":"GCS1"}\n')
    world.engine.run_for_ms(2000)
    conn.send(b'{"cmd":"NewConnection","client":"GCS1","server":"UXV1"}\n')
    world.engine.run_for_ms(8000)
    updates = [d for d in world.docs(raw) if d["event"] == "MapUpdated"]
    assert updates
    assert updates[-1]["map"][0]["uxv"] == "UXV1"
    assert updates[-1]["map"][0]["gcs"] == "GCS1"


def test_stats_fold_replaces_per_datagram_events(world):
    conn, raw = world.client()
    conn.send(b'{"cmd":"NewConnection","client":"TC1","server":"GCS1"}\n')
    world.engine.run_for_ms(2000)
    conn.send(b'{"cmd":"NewConnection","client":"GCS1","server":"UXV1"}\n')
    world.engine.run_for_ms(8000)
    docs = world.docs(raw)
    assert not any(d["event"] in ("MsgSent", "MsgRecv") for d in docs)
    rows = [row for d in docs if d["event"] == "Stats"
            for row in d["traffic"]]
    gcs_rows = [r for r in rows if r["peer"] == "GCS1"]
    # telemetry climbs the chain, so the commander mostly receives
    assert gcs_rows and sum(r["recv"] for r in gcs_rows) > 0
    assert sum(r["recv_bytes"] for r in gcs_rows) > 0


def test_stats_row_arithmetic(world):
    conn, raw = world.client()
    conn.send(b'{"cmd":"Snapshot"}\n')
    world.engine.run_for_ms(50)
    t = world.engine.now_ms()
    world.api.sink("TC1", "MsgSent", t, {"peer": "GCS1", "bytes": 40})
    world.api.sink("TC1", "MsgSent", t, {"peer": "GCS1", "bytes": 60})
    world.api.sink("TC1", "MsgRecv", t, {"peer": "GCS1", "bytes": 25})
    world.api.sink("TC1", "MsgDropped", t, {"peer": "GCS1",
                                            "reason": "BadMac"})
    world.engine.run_for_ms(1500)
    stats = [d for d in world.docs(raw) if d["event"] == "Stats"]
    assert {"peer": "GCS1", "sent": 2, "sent_bytes": 100, "recv": 1,
            "recv_bytes": 25, "dropped": 1} in stats[0]["traffic"]
    # counters reset once reported
    assert all(not d["traffic"] for d in stats[1:])


def test_bad_json_keeps_connection_alive(world):
    conn, raw = world.client()
    conn.send(b'this is not json\n{"cmd":"Snapshot","ref":"ok"}\n')
    world.engine.run_for_ms(100)
    docs = world.docs(raw)
    assert docs[0]["event"] == "Error" and "bad JSON" in docs[0]["error"]
    assert docs[1]["event"] == "Snapshot" and docs[1]["ref"] == "ok"


def test_unknown_command_acks_with_error(world):
    conn, raw = world.client()
    conn.send(b'{"cmd":"Reboot","ref":"x"}\n')
    world.engine.run_for_ms(100)
    ack = world.docs(raw)[0]
    assert ack["event"] == "CmdAck" and ack["ok"] is False
    assert "unknown command" in ack["error"]


def test_missing_cmd_key_is_an_error(world):
    conn, raw = world.client()
    conn.send(b'{"ref":"x"}\n[1,2]\n')
    world.engine.run_for_ms(100)
    docs = world.docs(raw)
    assert [d["event"] for d in docs] == ["Error", "Error"]


# --- read-only endpoints ----------------------------------------------------


def test_non_commander_endpoint_refuses_verbs(world):
    gcs_api = control_api.ControlServer(world.engine, world.nodes["GCS1"],
                                        world.hosts["GCS1"], port=50001)
    assert gcs_api.read_only is True
    conn, raw = world.client(port=50001, ip="10.0.0.2")
    conn.send(b'{"cmd":"NewConnection","client":"TC1","server":"GCS1",'
              b'"ref":"q"}\n{"cmd":"Snapshot"}\n')
    world.engine.run_for_ms(100)
    docs = world.docs(raw)
    assert docs[0]["event"] == "CmdAck" and docs[0]["ok"] is False
    assert "read-only" in docs[0]["error"] and docs[0]["ref"] == "q"
    assert docs[1]["event"] == "Snapshot" and docs[1]["read_only"] is True


def test_commander_endpoint_can_be_forced_read_only(world):
    ro_api = control_api.ControlServer(world.engine, world.nodes["TC1"],
                                       world.hosts["TC1"], port=50002,
                                       read_only=True)
    conn, raw = world.client(port=50002)
    conn.send(b'{"cmd":"RenewArtifacts"}\n')
    world.engine.run_for_ms(100)
    assert world.docs(raw)[0]["ok"] is False


# --- WebSocket mode ---------------------------------------------------------


def test_ws_accept_key_matches_reference_vector():
    assert control_api.ws_accept_key(SAMPLE_KEY) == SAMPLE_ACCEPT


def test_ws_handshake_snapshot_and_ping(world):
    conn, raw = world.client()
    conn.send(b"GET /ws HTTP/1.1\r\nHost: c\r\nUpgrade: websocket\r\n"
              b"Connection: Upgrade\r\n"
              b"Sec-WebSocket-Key: " + SAMPLE_KEY.encode() + b"\r\n"
              b"Sec-WebSocket-Version: 13\r\n\r\n")
    world.engine.run_for_ms(100)
    head, rest = bytes(raw).split(b"\r\n\r\n", 1)
    assert head.startswith(b"HTTP/1.1 101")
    assert f"Sec-WebSocket-Accept: {SAMPLE_ACCEPT}".encode() in head

    conn.send(mask_frame(control_api.OP_TEXT, b'{"cmd":"Snapshot","ref":"w"}'))
    conn.send(mask_frame(control_api.OP_PING, b"hb"))
    world.engine.run_for_ms(200)
    frames, _ = server_frames(bytes(raw).split(b"\r\n\r\n", 1)[1])
    texts = [json.loads(p) for op, p in frames if op == control_api.OP_TEXT]
    assert any(d["event"] == "Snapshot" and d["ref"] == "w" for d in texts)
    assert (control_api.OP_PONG, b"hb") in frames


def test_ws_close_is_echoed(world):
    conn, raw = world.client()
    conn.send(b"GET / HTTP/1.1\r\nUpgrade: websocket\r\n"
              b"Connection: Upgrade\r\nSec-WebSocket-Key: AAAA\r\n\r\n")
    world.engine.run_for_ms(100)
    before = len(raw)
    conn.send(mask_frame(control_api.OP_CLOSE, b"\x03\xe8"))
    world.engine.run_for_ms(200)
    frames, _ = server_frames(bytes(raw)[before:])
    assert frames and frames[0][0] == control_api.OP_CLOSE


def test_ws_events_flow_as_frames(world):
    conn, raw = world.client()
    conn.send(b"GET / HTTP/1.1\r\nUpgrade: websocket\r\n"
              b"Connection: Upgrade\r\nSec-WebSocket-Key: AAAA\r\n\r\n")
    world.engine.run_for_ms(100)
    split = len(raw)
    conn.send(mask_frame(control_api.OP_TEXT,
                         json.dumps({"cmd": "NewConnection", "client": "TC1",
                                     "server": "GCS1"}).encode()))
    world.engine.run_for_ms(2000)
    frames, _ = server_frames(bytes(raw)[split:])
    texts = [json.loads(p) for op, p in frames if op == control_api.OP_TEXT]
    assert any(d["event"] == "SessionUp" for d in texts)


def test_ws_frame_codec_round_trip():
    payload = json.dumps({"k": list(range(40))}).encode()
    framed = control_api.ws_frame(control_api.OP_TEXT, payload)
    masked = mask_frame(control_api.OP_TEXT, payload)
    opcode, decoded, used = control_api.ws_parse(masked)
    assert (opcode, decoded, used) == (control_api.OP_TEXT, payload,
                                       len(masked))
    # server frames are unmasked: header plus raw payload
    assert framed.endswith(payload) and not framed[1] & 0x80


def test_ws_parse_rejects_unmasked_and_fragments():
    unmasked = bytes([0x81, 0x02]) + b"{}"
    with pytest.raises(ValueError, match="masked"):
        control_api.ws_parse(unmasked)
    fragment = bytes([0x01, 0x80 | 1, 1, 2, 3, 4, 0x7B])
    with pytest.raises(ValueError, match="fragment"):
        control_api.ws_parse(fragment)
    assert control_api.ws_parse(b"\x81") is None
    assert control_api.ws_parse(mask_frame(0x1, b"xy")[:-1]) is None


# --- HTTP static mode -------------------------------------------------------


def test_placeholder_page_when_no_assets(world):
    conn, raw = world.client()
    conn.send(b"GET / HTTP/1.1\r\nHost: c\r\n\r\n")
    world.engine.run_for_ms(2000)
    head, body = bytes(raw).split(b"\r\n\r\n", 1)
    assert b"200 OK" in head and b"text/html" in head
    assert b"WebSocket" in body


def test_static_serving_and_traversal_guard(tmp_path):
    (tmp_path / "index.html").write_text("<h1>console</h1>")
    sub = tmp_path / "js"
    sub.mkdir()
    (sub / "app.js").write_text("boot();")
    world = World(tmp_assets=tmp_path)

    for target, expect_head, expect_body in (
            (b"/", b"text/html", b"<h1>console</h1>"),
            (b"/js/app.js", b"text/javascript", b"boot();"),
            (b"/missing.css", b"404", b"not found\n"),
            (b"/../../etc/passwd", b"404", b"not found\n")):
        conn, raw = world.client()
        conn.send(b"GET " + target + b" HTTP/1.1\r\nHost: c\r\n\r\n")
        world.engine.run_for_ms(2000)
        head, body = bytes(raw).split(b"\r\n\r\n", 1)
        assert expect_head in head, target
        assert body == expect_body, target


def test_post_is_rejected(world):
    conn, raw = world.client()
    conn.send(b"POST / HTTP/1.1\r\nHost: c\r\nContent-Length: 0\r\n\r\n")
    world.engine.run_for_ms(2000)
    assert b"405" in bytes(raw)


# --- plumbing ---------------------------------------------------------------


def test_forward_tee_sees_folded_events():
    world = World()
    seen = []
    world.api.forward = lambda node, name, t, fields: seen.append(name)
    conn, raw = world.client()
    conn.send(b'{"cmd":"NewConnection","client":"TC1","server":"GCS1"}\n')
    world.engine.run_for_ms(2000)
    conn.send(b'{"cmd":"NewConnection","client":"GCS1","server":"UXV1"}\n')
    world.engine.run_for_ms(8000)
    assert "MsgRecv" in seen and "SessionUp" in seen


def test_jsonable_normalizes_values():
    assert control_api.jsonable(b"\x01\xff") == "01ff"
    assert control_api.jsonable((1, "a", b"\x00")) == [1, "a", "00"]
    # str-valued enums ride through json.dumps as their wire value
    assert json.dumps(control_api.jsonable({1: Role.CT1})) == '{"1": "ct1"}'
    assert control_api.jsonable(None) is None


def test_close_stops_listening_and_disconnects(world):
    conn, raw = world.client()
    conn.send(b'{"cmd":"Snapshot"}\n')
    world.engine.run_for_ms(100)
    assert world.docs(raw)
    world.api.close()
    world.engine.run_for_ms(500)
    assert conn.state == "closed"
