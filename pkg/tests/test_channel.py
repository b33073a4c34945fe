import random

import pytest

from nc2s import artifacts, channel, crypto, emulator as em, policy

SEED = 1313
EPOCH_MS = artifacts.DETERMINISTIC_EPOCH_MS


@pytest.fixture(scope="module")
def mission():
    return artifacts.generate_mission(
        artifacts.default_node_list(), policy.default_policy_doc(), seed=SEED
    )


class Lab:
    """Two hosts, one link, a listener, and channel factories on both ends."""

    def __init__(self, mission, profile=em.WIFI, seed=SEED):
        self.engine = em.EventEngine(start_ms=EPOCH_MS)
        self.net = em.VirtualNetwork(self.engine, seed=seed)
        self.bc = mission.bundles["TC1"]
        self.bs = mission.bundles["GCS1"]
        self.hc = self.net.add_host("TC1", self.bc.identity.ip_address)
        self.hs = self.net.add_host("GCS1", self.bs.identity.ip_address)
        self.link = self.net.connect(self.hc.ip, self.hs.ip, profile)
        self.events = []
        self.server_chan = None
        self.client_chan = None

    def work(self, cost_ms, fn):
        return self.engine.after_ms(cost_ms, fn)

    def chan_kwargs(self, bundle, verify, tag):
        return dict(
            rng=random.Random(crypto.sub_seed(SEED, f"chan:{tag}")),
            node_key=bundle.own_private_key,
            own_cert_der=bundle.own_certificate.der,
            verify_peer=verify,
            work=self.work,
            schedule=self.engine.after_ms,
            on_ready=lambda c: self.events.append((tag, "ready", self.engine.now_ms())),
            on_record=lambda c, t, b: self.events.append((tag, "record", t, b)),
            on_fail=lambda c, f: self.events.append((tag, "fail", f)),
        )

    def listen(self, verify=None):
        verify = verify or (lambda cert: artifacts.ACCEPT)

        def accept(conn):
            self.server_chan = channel.SecureChannel(
                is_client=False, **self.chan_kwargs(self.bs, verify, "server"))
            self.server_chan.bind(conn)

        self.hs.listen_stream(self.bs.server_port, accept)

    def dial(self, verify=None):
        verify = verify or (lambda cert: artifacts.ACCEPT)
        self.client_chan = channel.SecureChannel(
            is_client=True, **self.chan_kwargs(self.bc, verify, "client"))
        conn = self.hc.connect_stream((self.hs.ip, self.bs.server_port),
                                      on_open=None, on_data=None, on_close=None)
        self.client_chan.bind(conn)
        return self.client_chan

    def of(self, tag, kind):
        return [e for e in self.events if e[0] == tag and e[1] == kind]


def test_mutual_handshake_reaches_ready(mission):
    lab = Lab(mission)
    lab.listen()
    lab.dial()
    lab.engine.run_until_idle()
    assert len(lab.of("client", "ready")) == 1
    assert len(lab.of("server", "ready")) == 1
    assert not lab.of("client", "fail") and not lab.of("server", "fail")
    assert lab.client_chan.peer_cert.common_name == "GCS1"
    assert lab.server_chan.peer_cert.common_name == "TC1"
    # server authenticates second, so the client becomes ready after it
    assert lab.of("server", "ready")[0][2] <= lab.of("client", "ready")[0][2]


def test_ready_time_reflects_compute_charges(mission):
    # serial charges on the critical path: 25+25+15+45+15+45 = 170 ms plus a
    # few WIFI round trips
    lab = Lab(mission)
    lab.listen()
    lab.dial()
    t0 = lab.engine.now_ms()
    lab.engine.run_until_idle()
    ready_ms = lab.of("client", "ready")[0][2] - t0
    assert 170 <= ready_ms <= 250


def test_records_flow_both_ways_after_ready(mission):
    lab = Lab(mission)
    lab.listen()
    lab.dial()
    lab.engine.run_until_idle()
    lab.client_chan.send_record(0x20, b"ping")
    lab.engine.run_until_idle()
    got = lab.of("server", "record")
    assert got and got[-1][2:] == (0x20, b"ping")
    lab.server_chan.send_records([(0x21, b"pong"), (0x22, b"")])
    lab.engine.run_until_idle()
    types = [(e[2], e[3]) for e in lab.of("client", "record")]
    assert (0x21, b"pong") in types and (0x22, b"") in types


def test_record_keys_differ_per_direction(mission):
    lab = Lab(mission)
    lab.listen()
    lab.dial()
    lab.engine.run_until_idle()
    assert lab.client_chan._send_key == lab.server_chan._recv_key
    assert lab.client_chan._recv_key == lab.server_chan._send_key
    assert lab.client_chan._send_key != lab.client_chan._recv_key


def test_peer_rejection_aborts_with_its_verdict(mission):
    # server's verifier says Revoked: both ends surface step 2 with the reason
    lab = Lab(mission)
    lab.listen(verify=lambda cert: artifacts.reject(artifacts.REVOKED))
    lab.dial()
    lab.engine.run_until_idle()
    (server_fail,) = lab.of("server", "fail")
    assert server_fail[2] == channel.Failure(2, "Revoked")
    (client_fail,) = lab.of("client", "fail")
    assert client_fail[2] == channel.Failure(2, "Revoked")
    assert not lab.of("client", "ready")


def test_owner_abort_alerts_peer(mission):
    lab = Lab(mission)
    lab.listen()
    lab.dial()
    lab.engine.run_until_idle()
    lab.server_chan.abort(4, "KeyMismatch")
    lab.engine.run_until_idle()
    (client_fail,) = lab.of("client", "fail")
    assert client_fail[2] == channel.Failure(4, "KeyMismatch")


def test_handshake_timeout_without_listener(mission):
    lab = Lab(mission)
    lab.dial()  # nothing listening; SYN goes nowhere
    t0 = lab.engine.now_ms()
    lab.engine.run_until_idle()
    (fail,) = lab.of("client", "fail")
    assert fail[2].step == channel.STEP_HANDSHAKE
    assert fail[2].reason == "Timeout"
    assert lab.engine.now_ms() - t0 >= 20_000


def test_hello_rewrite_breaks_both_transcripts(mission):
    # on-path rewrite of one hello byte: neither side can read the other's
    # records and the certificate signatures could never bind anyway
    lab = Lab(mission)
    script = [em.AdvAction(kind="mitm", match=lambda d: len(d) == 80, count=1,
                           rewrite=lambda d: d[:20] + bytes([d[20] ^ 0xFF]) + d[21:])]
    em.run_adversary(script, lab.link)
    lab.listen()
    lab.dial()
    lab.engine.run_until_idle()
    fails = lab.of("client", "fail") + lab.of("server", "fail")
    assert len(fails) == 2
    assert all(f[2].step == channel.STEP_CERTIFICATE for f in fails)
    assert all(f[2].reason == "ChannelIntegrity" for f in fails)
    assert not lab.of("client", "ready") and not lab.of("server", "ready")


def test_tampered_record_fails_closed(mission):
    # flip a bit in an encrypted record in flight: AEAD rejects, channel dies
    lab = Lab(mission)
    script = [em.AdvAction(
        kind="mitm",
        match=lambda d: len(d) > 90,
        count=1,
        rewrite=lambda d: d[:-1] + bytes([d[-1] ^ 0x01]))]
    em.run_adversary(script, lab.link)
    lab.listen()
    lab.dial()
    lab.engine.run_until_idle()
    server_fails = lab.of("server", "fail")
    assert server_fails and server_fails[0][2].reason == "ChannelIntegrity"
