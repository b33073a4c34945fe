from collections import Counter
from dataclasses import replace

import pytest

from nc2s import artifacts, emulator as em, keyschedule as ks
from nc2s import nodes, policy, session, wire
from nc2s.artifacts import Role

SEED = 7171
EPOCH_MS = artifacts.DETERMINISTIC_EPOCH_MS

WIFI0 = replace(em.WIFI, loss_rate=0.0)
RADIO0 = replace(em.RADIO, loss_rate=0.0)


@pytest.fixture(scope="module")
def mission():
    node_list = artifacts.default_node_list() + [
        artifacts.NodeIdentity("GCS2", "10.10.2.21", Role.GCS),
    ]
    return artifacts.generate_mission(node_list, policy.default_policy_doc(),
                                      seed=SEED)


# --- pure pieces ------------------------------------------------------------


def test_frame_codec_and_classify():
    hb = nodes.build_frame(nodes.MSG_HEARTBEAT, bytes(9), 4)
    gps = nodes.build_frame(nodes.MSG_GPS, bytes(28), 5)
    bulk = nodes.build_frame(nodes.MSG_BULK, bytes(100), 6)
    assert len(hb) == 17 and len(gps) == 36 and len(bulk) == 108
    assert nodes.classify_frame(hb) is nodes.FrameCategory.HEARTBEAT
    assert nodes.classify_frame(gps) is nodes.FrameCategory.GPS
    assert nodes.classify_frame(bulk) is nodes.FrameCategory.OTHER
    # classification never rejects: junk and truncation are just OTHER
    assert nodes.classify_frame(b"") is nodes.FrameCategory.OTHER
    assert nodes.classify_frame(b"\x00\x01\x02") is nodes.FrameCategory.OTHER
    assert nodes.classify_frame(bytes(200)) is nodes.FrameCategory.OTHER
    with pytest.raises(ValueError):
        nodes.build_frame(nodes.MSG_BULK, bytes(256), 0)


def test_radio_filter_gating():
    hb = nodes.build_frame(nodes.MSG_HEARTBEAT, bytes(9), 0)
    gps = nodes.build_frame(nodes.MSG_GPS, bytes(28), 1)
    bulk = nodes.build_frame(nodes.MSG_BULK, bytes(50), 2)
    state = {}
    assert nodes.radio_filter(hb, 1_000, state, 10_000)
    assert not nodes.radio_filter(hb, 6_000, state, 10_000)
    assert nodes.radio_filter(hb, 11_000, state, 10_000)
    # position frames rate-limit independently of heartbeats
    assert nodes.radio_filter(gps, 6_000, state, 10_000)
    assert not nodes.radio_filter(gps, 9_000, state, 10_000)
    assert not nodes.radio_filter(bulk, 6_000, state, 10_000)

    # broadband forwards everything and leaves no state behind
    state = {}
    for frame in (hb, gps, bulk, bulk):
        assert nodes.radio_filter(frame, 0, state, 10_000, narrowband=False)
    assert state == {}


def test_map_report_codec():
    payload = nodes.encode_map_report("GCS1", [("UXV1", 123), ("UXV2", 456)])
    reporter, entries = nodes.decode_map_report(payload)
    assert reporter == "GCS1"
    assert entries == [("UXV1", 123), ("UXV2", 456)]
    empty = nodes.encode_map_report("GCS1", [])
    assert nodes.decode_map_report(empty) == ("GCS1", [])
    for bad in (b"", payload[:-1], payload + b"\x00", b"\x00"):
        with pytest.raises(ValueError):
            nodes.decode_map_report(bad)


def test_map_aggregate_codec():
    entries = [nodes.MapEntry("UXV1", "GCS1", 99), nodes.MapEntry("UXV2", "GCS2", 5)]
    payload = nodes.encode_map_aggregate(["GCS1", "GCS2"], entries)
    reporters, decoded = nodes.decode_map_aggregate(payload)
    assert reporters == ["GCS1", "GCS2"]
    assert decoded == entries
    for bad in (b"", payload[:-1], payload + b"\x00"):
        with pytest.raises(ValueError):
            nodes.decode_map_aggregate(bad)


def test_map_aggregate_newest_wins():
    reporters, entries = nodes.map_aggregate([
        ("GCS2", [("UXV1", 200), ("UXV3", 50)]),
        ("GCS1", [("UXV1", 100), ("UXV2", 300)]),
    ])
    assert reporters == ["GCS1", "GCS2"]
    by_cn = {e.uxv_cn: e for e in entries}
    assert by_cn["UXV1"].gcs_cn == "GCS2" and by_cn["UXV1"].last_seen_ms == 200
    assert by_cn["UXV2"].gcs_cn == "GCS1"
    assert [e.uxv_cn for e in entries] == sorted(by_cn)


def test_renewal_actions_thresholds(mission):
    b = mission.bundles["TC1"]
    pk = b.own_certificate.public_point()
    cred = artifacts.sign_credential(b.own_private_key, 3, pk, pk, "CTRL",
                                     0, 100_000)
    rl = artifacts.build_credrl(b.own_private_key, [], (0, 100_000))
    assert nodes.renewal_actions([("c", cred)], [], None, rl, 79_999) == []
    acts = nodes.renewal_actions([("c", cred)], [], None, rl, 80_000)
    assert ("credential", "c") in acts and ("credrl", None) in acts

    cert = b.own_certificate
    aged = cert.not_before_ms + int(0.8 * (cert.not_after_ms - cert.not_before_ms))
    assert nodes.renewal_actions([], [("TC1", cert)], None, None, aged - 1) == []
    assert nodes.renewal_actions([], [("TC1", cert)], None, None, aged) == [
        ("certificate", "TC1")]
    # a custom fraction moves the trigger point
    assert nodes.renewal_actions([("c", cred)], [], None, None, 50_000,
                                 threshold=0.5) == [("credential", "c")]


def test_node_runtime_serializes_charges():
    engine = em.EventEngine(start_ms=0)
    runtime = nodes.NodeRuntime(engine)
    ran = []
    runtime.submit(10, lambda: ran.append(("a", engine.now_ms())))
    runtime.submit(5, lambda: ran.append(("b", engine.now_ms())))
    assert runtime.backlog_ms == pytest.approx(15.0)
    engine.run_until_idle()
    assert ran == [("a", 10), ("b", 15)]
    # once drained, a later charge starts from the instant it is submitted
    engine.after_ms(100, lambda: runtime.submit(2, lambda: ran.append(
        ("c", engine.now_ms()))))
    engine.run_until_idle()
    assert ran[-1] == ("c", 117)


def test_autopilot_rates_and_ack():
    engine = em.EventEngine(start_ms=0)
    frames = []
    pilot = nodes.StubAutopilot(engine, frames.append)
    pilot.start()
    engine.run_for_ms(10_000)
    pilot.stop()
    counts = Counter(nodes.classify_frame(f) for f in frames)
    assert counts[nodes.FrameCategory.HEARTBEAT] == 10
    assert counts[nodes.FrameCategory.GPS] == 10
    bulk = counts[nodes.FrameCategory.OTHER]
    assert 145 <= bulk <= 155
    rate_bps = sum(len(f) for f in frames) * 8 / 10.0
    assert 31_000 <= rate_bps <= 33_500

    cmd = nodes.build_frame(70, b"\x01\x02\x03", 9)
    pilot.handle_command(cmd)
    assert pilot.commands == [cmd]
    assert frames[-1][5] == nodes.MSG_ACK


# --- full role integration --------------------------------------------------


class NodeLab:
    """Hosts, links and role runtimes for one emulated mission slice."""

    def __init__(self, mission, links, seed=SEED, node_kw=None):
        self.mission = mission
        self.engine = em.EventEngine(start_ms=EPOCH_MS)
        self.net = em.VirtualNetwork(self.engine, seed=seed)
        self.events = []
        self.hosts = {}
        self.links = {}
        self.nodes = {}
        names = []
        for a, b, _profile in links:
            names += [a, b]
        for cn in dict.fromkeys(names):
            bundle = mission.bundles[cn]
            self.hosts[cn] = self.net.add_host(cn, bundle.identity.ip_address)
        for a, b, profile in links:
            self.links[(a, b)] = self.net.connect(
                self.hosts[a].ip, self.hosts[b].ip, profile)
        overrides = node_kw or {}
        for cn, host in self.hosts.items():
            bundle = mission.bundles[cn]
            kw = dict(overrides.get(cn, {}))
            if bundle.identity.role is Role.CT1:
                kw.setdefault("ca_signer", self.ca_signer)
            self.nodes[cn] = nodes.make_node(
                bundle, host, self.engine, seed=seed,
                event_sink=lambda cn, name, t, f: self.events.append(
                    (cn, name, t, f)),
                **kw)
        for node in self.nodes.values():
            node.start()

    def ca_signer(self, serials, validity):
        return artifacts.build_certrl(self.mission.ca_key, serials, validity)

    def run(self, ms):
        self.engine.run_for_ms(ms)

    def connect(self, client, server, settle_ms=2_500, **extra):
        res = self.nodes["TC1"].ct1_command(
            {"cmd": "NewConnection", "client": client, "server": server, **extra})
        assert res["ok"], res["error"]
        self.run(settle_ms)
        sess = self.nodes[client].sessions.get(server)
        assert sess is not None and sess.state.phase is session.Phase.ESTABLISHED
        return res

    def ev(self, cn=None, name=None):
        return [e for e in self.events
                if (cn is None or e[0] == cn) and (name is None or e[1] == name)]

    def session(self, cn, peer):
        return self.nodes[cn].sessions.get(peer)


def test_commanded_connection_direct(mission):
    lab = NodeLab(mission, [("TC1", "TC2", WIFI0)])
    res = lab.nodes["TC1"].ct1_command(
        {"cmd": "NewConnection", "client": "TC1", "server": "TC2"})
    assert res["ok"] and res["error"] is None
    lab.run(1_500)
    up = lab.session("TC1", "TC2")
    down = lab.session("TC2", "TC1")
    assert up is not None and down is not None
    assert up.state.is_client and not down.state.is_client
    assert up.state.credential.cap == "C2"
    done = [e for e in lab.ev("TC1", "CmdDone") if e[3]["cid"] == res["cid"]]
    assert len(done) == 1
    assert len(lab.ev("TC1", "SessionUp")) == 1
    assert len(lab.ev("TC2", "SessionUp")) == 1
    assert lab.nodes["TC1"].issued[0].server_cn == "TC2"


def chain_lab(mission, backhaul=WIFI0, backhaul_bps=0, node_kw=None):
    """TC1-TC2-GCS1-UXV1 chain; TC1 reaches GCS1 only through TC2."""
    lab = NodeLab(mission, [
        ("TC1", "TC2", WIFI0),
        ("TC2", "GCS1", backhaul),
        ("GCS1", "UXV1", WIFI0),
    ], node_kw=node_kw)
    lab.connect("TC1", "TC2")
    settle = 30_000 if backhaul is not WIFI0 else 2_500
    lab.connect("TC2", "GCS1", settle_ms=settle, capacity_bps=backhaul_bps)
    lab.connect("GCS1", "UXV1", settle_ms=settle)
    return lab


def test_routed_order_chain(mission):
    lab = chain_lab(mission)
    for client, server in (("TC1", "TC2"), ("TC2", "GCS1"), ("GCS1", "UXV1")):
        assert lab.session(client, server).state.peer.common_name == server
        assert lab.session(server, client).state.peer.common_name == client
    # the third order left TC1 as 0x05 toward TC2, then 0x08 toward GCS1
    assert any(e[3]["msg_type"] == wire.ORDER_CT2
               for e in lab.ev("TC1", "MsgSent"))
    assert any(e[3]["msg_type"] == wire.ORDER_GCS
               for e in lab.ev("TC2", "MsgSent"))
    assert lab.ev(name="EstFailed") == []
    assert lab.ev(name="RouteDead") == []
    # vehicle link defaults to a control credential, backhaul stays C2
    assert lab.session("GCS1", "UXV1").state.credential.cap == "CTRL"
    assert lab.session("TC2", "GCS1").state.credential.cap == "C2"


def test_map_reports_flow_to_commanders(mission):
    lab = chain_lab(mission)
    lab.run(17_000)
    ct2_map = lab.nodes["TC2"].network_map
    tc1_map = lab.nodes["TC1"].network_map
    assert ct2_map["UXV1"].gcs_cn == "GCS1"
    assert tc1_map["UXV1"].gcs_cn == "GCS1"
    assert tc1_map["UXV1"].last_seen_ms > EPOCH_MS
    assert any(e[3]["msg_type"] == wire.MAP_REPORT
               for e in lab.ev("GCS1", "MsgSent"))
    assert any(e[3]["msg_type"] == wire.MAP_AGGREGATE
               for e in lab.ev("TC2", "MsgSent"))


def test_telemetry_passthrough_broadband(mission):
    lab = NodeLab(mission, [
        ("TC1", "GCS1", WIFI0),
        ("GCS1", "UXV1", WIFI0),
    ])
    uxv = lab.nodes["UXV1"]
    sent = []
    forward = uxv.autopilot.on_frame

    def tee(frame):
        sent.append(frame)
        forward(frame)

    uxv.autopilot.on_frame = tee
    lab.connect("TC1", "GCS1")
    lab.connect("GCS1", "UXV1")
    lab.run(5_000)
    uxv.autopilot.stop()
    lab.run(300)

    gcs = lab.nodes["GCS1"]
    # every frame the operator saw is byte-identical to one the vehicle sent
    assert not Counter(gcs.operator_frames) - Counter(sent)
    assert len(gcs.operator_frames) > 60
    relayed = [e for e in lab.ev("GCS1", "MsgSent")
               if e[3]["msg_type"] == wire.DATA and e[3]["peer"] == "TC1"]
    received = [e for e in lab.ev("TC1", "MsgRecv")
                if e[3]["msg_type"] == wire.DATA]
    # broadband backhaul: no filtering, no loss
    assert len(relayed) == len(gcs.operator_frames)
    assert len(received) == len(relayed)


def test_narrowband_filter_on_radio_backhaul(mission):
    lab = chain_lab(mission, backhaul=RADIO0, backhaul_bps=5_000)
    backhaul = lab.session("TC2", "GCS1")
    assert backhaul.state.narrowband
    mark = len(lab.events)
    lab.run(30_000)
    window = lab.events[mark:]
    upstream = [e for e in window
                if e[0] == "GCS1" and e[1] == "MsgSent"
                and e[3]["msg_type"] == wire.DATA and e[3]["peer"] == "TC2"]
    # heartbeat and position only, each at most once per 10 s
    assert 2 <= len(upstream) <= 8
    overhead = wire.HEADER_LEN + wire.TRAILER_LEN
    assert all(e[3]["bytes"] <= 36 + overhead for e in upstream)
    # the vehicle link itself stays unfiltered
    operator = lab.nodes["GCS1"].operator_frames
    assert len(operator) > 300


def test_operator_command_ack_roundtrip(mission):
    lab = NodeLab(mission, [
        ("TC1", "GCS1", WIFI0),
        ("GCS1", "UXV1", WIFI0),
    ])
    lab.connect("TC1", "GCS1")
    lab.connect("GCS1", "UXV1")
    gcs, uxv = lab.nodes["GCS1"], lab.nodes["UXV1"]

    cmd = nodes.build_frame(70, b"\x01\x02\x03\x04", 1)
    assert gcs.operator_send(cmd, "UXV1")
    lab.run(500)
    assert cmd in uxv.received_frames
    assert uxv.autopilot.commands == [cmd]
    assert any(f[5] == nodes.MSG_ACK for f in gcs.operator_frames)

    # anything that cannot fit one datagram under the link MTU dies locally
    assert not gcs.operator_send(bytes(1_500), "UXV1")
    drops = [e for e in lab.ev("GCS1", "MsgDropped")
             if e[3].get("reason") == "MtuExceeded"]
    assert len(drops) == 1


def test_credential_revocation_closes_only_target(mission):
    lab = NodeLab(mission, [
        ("TC1", "TC2", WIFI0),
        ("TC1", "GCS1", WIFI0),
        ("TC2", "GCS1", WIFI0),
        ("GCS1", "UXV1", WIFI0),
    ])
    lab.connect("TC1", "TC2")
    lab.connect("TC1", "GCS1")
    lab.connect("TC2", "GCS1")
    lab.connect("GCS1", "UXV1")

    res = lab.nodes["TC1"].ct1_command(
        {"cmd": "RevokeCredential", "client": "GCS1", "server": "UXV1"})
    assert res["ok"]
    lab.run(2_000)

    assert lab.session("GCS1", "UXV1") is None
    assert lab.session("UXV1", "GCS1") is None
    for cn, peer in (("TC1", "TC2"), ("TC1", "GCS1"), ("TC2", "GCS1")):
        assert lab.session(cn, peer) is not None
        assert lab.session(peer, cn) is not None

    for cn in ("TC1", "TC2", "GCS1", "UXV1"):
        applied = [e for e in lab.ev(cn, "RlApplied") if e[3]["kind"] == "cred"]
        assert len(applied) == 1, cn
    # the second copy arriving over the redundant path is recognised as old
    stale = [e for e in lab.ev(name="RlIgnored") if e[3]["reason"] == "Stale"]
    assert len(stale) >= 1
    closed = lab.ev(name="SessionClosed")
    assert sorted((e[0], e[3]["peer"]) for e in closed) == [
        ("GCS1", "UXV1"), ("UXV1", "GCS1")]
    assert all(e[3]["reason"] == "Revoked" for e in closed)


def test_certificate_revocation_severs_peer(mission):
    lab = chain_lab(mission)
    res = lab.nodes["TC1"].ct1_command({"cmd": "RevokeCertificate", "cn": "UXV1"})
    assert res["ok"]
    lab.run(2_000)
    # the vehicle's peers drop it; revocation is silent toward the revoked node
    assert lab.session("GCS1", "UXV1") is None
    assert lab.session("TC2", "GCS1") is not None
    assert lab.session("TC1", "TC2") is not None
    for cn in ("TC2", "GCS1", "UXV1"):
        applied = [e for e in lab.ev(cn, "RlApplied") if e[3]["kind"] == "cert"]
        assert len(applied) == 1, cn
    closed = [e for e in lab.ev("GCS1", "SessionClosed")]
    assert [(e[3]["peer"], e[3]["reason"]) for e in closed] == [("UXV1", "Revoked")]


def test_change_capacity_handover(mission):
    lab = NodeLab(mission, [
        ("TC1", "GCS1", WIFI0),
        ("TC1", "GCS2", WIFI0),
        ("GCS1", "UXV1", WIFI0),
        ("GCS2", "UXV1", WIFI0),
    ])
    lab.connect("TC1", "GCS1")
    lab.connect("TC1", "GCS2")
    lab.connect("GCS1", "UXV1", capacity="CTRL")
    lab.connect("GCS2", "UXV1", capacity="MON")
    gcs1, gcs2 = lab.nodes["GCS1"], lab.nodes["GCS2"]

    probe = nodes.build_frame(70, b"\x05\x06", 2)
    assert gcs1.operator_send(probe, "UXV1")
    assert not gcs2.operator_send(probe, "UXV1")

    res = lab.nodes["TC1"].ct1_command({
        "cmd": "ChangeCapacity", "uxv": "UXV1",
        "predecessor": "GCS1", "successor": "GCS2"})
    assert res["ok"]
    lab.run(2_000)

    assert lab.session("GCS1", "UXV1").state.credential.cap == "MON"
    assert lab.session("GCS2", "UXV1").state.credential.cap == "CTRL"
    assert not gcs1.operator_send(probe, "UXV1")
    assert gcs2.operator_send(probe, "UXV1")

    # the predecessor loses control strictly before the successor gains it
    t_down = min(e[2] for e in lab.ev("GCS1", "CredUpdateApplied")
                 if e[3]["cap"] == "MON")
    t_up = min(e[2] for e in lab.ev("GCS2", "CredUpdateApplied")
               if e[3]["cap"] == "CTRL")
    assert t_down < t_up
    uxv_applied = [e[3]["cap"] for e in lab.ev("UXV1", "CredUpdateApplied")]
    assert sorted(uxv_applied) == ["CTRL", "MON"]
    # monitoring telemetry still reaches the demoted station
    before = len(gcs1.operator_frames)
    lab.run(3_000)
    assert len(gcs1.operator_frames) > before


def test_credential_reissued_before_expiry(mission):
    lab = NodeLab(mission, [("TC1", "TC2", WIFI0)])
    lab.connect("TC1", "TC2", lifetime_ms=60_000)
    first_iss = lab.session("TC1", "TC2").state.credential.t_iss
    lab.run(52_000)
    up, down = lab.session("TC1", "TC2"), lab.session("TC2", "TC1")
    assert up.state.phase is session.Phase.ESTABLISHED
    assert up.state.credential.t_iss > first_iss + 45_000
    assert down.state.credential.t_iss == up.state.credential.t_iss
    assert lab.ev("TC1", "CredUpdateApplied") and lab.ev("TC2", "CredUpdateApplied")
    assert up.send_message(wire.DATA, b"still here")
    lab.run(100)
    recv = [e for e in lab.ev("TC2", "MsgRecv") if e[3]["msg_type"] == wire.DATA]
    assert recv


def test_session_keys_renewed_via_runtime(mission):
    kw = {"key_lifetime_ms": 10_000}
    lab = NodeLab(mission, [("TC1", "TC2", WIFI0)],
                  node_kw={"TC1": dict(kw), "TC2": dict(kw)})
    lab.connect("TC1", "TC2")
    lab.run(7_500)
    up, down = lab.session("TC1", "TC2"), lab.session("TC2", "TC1")
    assert up.state.renewal.keys.epoch == 1
    assert {e[3]["side"] for e in lab.ev(name="RenewDone")} == {"client"}
    # the server finishes on the first datagram the client sends under the
    # new keys, so its completion trails the client's by the traffic gap
    assert up.send_message(wire.DATA, b"confirm")
    lab.run(200)
    assert down.state.renewal.keys.epoch == 1
    assert down.state.renewal.phase is ks.Phase.NORMAL
    sides = {e[3]["side"] for e in lab.ev(name="RenewDone")}
    assert sides == {"client", "server"}


def test_command_validation_errors(mission):
    lab = NodeLab(mission, [("TC1", "TC2", WIFI0)],
                  node_kw={"TC1": {"ca_signer": None}})
    tc1 = lab.nodes["TC1"]
    assert not tc1.ct1_command({"cmd": "SelfDestruct"})["ok"]
    assert not tc1.ct1_command(
        {"cmd": "NewConnection", "client": "TC9", "server": "TC2"})["ok"]
    assert not tc1.ct1_command(
        {"cmd": "NewConnection", "client": "TC2", "server": "UXV1"})["ok"]
    assert not tc1.ct1_command(
        {"cmd": "RevokeCredential", "client": "GCS1", "server": "UXV1"})["ok"]
    assert not tc1.ct1_command({"cmd": "RevokeCertificate", "cn": "TC2"})["ok"]
    assert not tc1.ct1_command({
        "cmd": "ChangeCapacity", "uxv": "UXV1",
        "predecessor": "GCS1", "successor": "GCS2"})["ok"]
    # an order for an unreachable client is signed but cannot leave
    res = tc1.ct1_command(
        {"cmd": "NewConnection", "client": "GCS1", "server": "UXV1"})
    assert res["ok"]
    lab.run(500)
    assert lab.ev("TC1", "RouteDead")
