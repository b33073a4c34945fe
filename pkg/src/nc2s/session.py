"""Per-link session state machine.

Establishment runs over the secure control channel in seven steps: channel
handshake, mutual certificate verification, credential presentation,
credential verification, a two-round clock-offset exchange, static-static
ECDH key derivation, and the client's UDP port announcement. The channel then
closes and all traffic moves to authenticated UDP datagrams.

Freshness over slow links: the clock exchange calibrates, per direction, the
age a datagram is expected to have on arrival (clock offset plus path delay).
On narrowband links the expectation is size-aware (serialization dominates at
kilobit rates), using a capacity hint carried in the connection order and
announced to the server along with the port. Each age measurement is taken
twice and the minimum kept, so a retransmitted exchange cannot poison the
calibration. Senders pace narrowband sessions so a burst handed to the link
does not age out in its own queue; what the pacer cannot absorb within a few
seconds is dropped as backpressure.

Key renewal rides normal datagrams: the client asks (0x11, empty), the server
answers with a 4-byte nonce (0x12) authenticated under the OLD outbound key,
the only one the client can check before it knows the nonce. Every datagram
captures its key when the send is committed, so in-order delivery keeps each
one verifiable across the switch.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from . import channel as chan
from . import crypto
from . import keyschedule as ks
from . import policy as pol
from . import wire
from .artifacts import (
    Certificate,
    ConfigBundle,
    Credential,
    NodeIdentity,
    Role,
    Verdict,
    link_type_for,
    reject,
    verify_certificate,
    verify_credential,
)
from .channel import Failure

# compute charges (virtual CPU milliseconds)
COST_CRED_VERIFY_MS = 25.0
COST_CLOCK_SYNC_MS = 1.0
COST_MASTER_ECDH_MS = 30.0
COST_KDF_MS = 2.0
COST_SESSION_SETUP_MS = 5.0
COST_RENEWAL_MS = 4.0

ESTABLISH_RETRIES = 3
ESTABLISH_RETRY_SPACING_MS = 20_000.0

NARROWBAND_THRESHOLD_BPS = 100_000
PACER_MAX_DELAY_MS = 5_000.0

# Stream-segment sizes of the two clock-exchange records, used to strip the
# size-dependent serialization share out of the measured ages:
# 12 (segment header) + 3 (frame) + 3 + body (record) + 16 (AEAD tag),
# with bodies of 9 (round, t1) and 25 (round, t1, t2, t3) bytes.
_NTP_REQ_WIRE = 43
_NTP_RESP_WIRE = 59

STEP_CREDENTIAL = 3
STEP_CRED_VERIFY = 4
STEP_CLOCK = 5
STEP_KEYS = 6
STEP_UDP = 7

_PORT_BODY = struct.Struct("!HI")  # udp port, capacity hint (bps, 0 = wideband)


class Phase(Enum):
    HANDSHAKING = "Handshaking"
    ESTABLISHED = "Established"
    CLOSED = "Closed"


def _per_byte_ms(capacity_bps: int) -> float:
    if 0 < capacity_bps < NARROWBAND_THRESHOLD_BPS:
        return 8_000.0 / capacity_bps
    return 0.0


# ---------------------------------------------------------------------------
# orders and routed payloads


def _pack_cn(cn: str) -> bytes:
    raw = cn.encode()
    if not 0 < len(raw) < 256:
        raise ValueError("common name does not fit the wire form")
    return bytes([len(raw)]) + raw


def _unpack_cn(buf: bytes, off: int) -> tuple[str, int]:
    if off >= len(buf):
        raise ValueError("truncated name")
    n = buf[off]
    off += 1
    if n == 0 or off + n > len(buf):
        raise ValueError("truncated name")
    return buf[off:off + n].decode(), off + n


def _pack_route(route: tuple[str, ...]) -> bytes:
    return bytes([len(route)]) + b"".join(_pack_cn(cn) for cn in route)


def _unpack_route(buf: bytes, off: int) -> tuple[tuple[str, ...], int]:
    if off >= len(buf):
        raise ValueError("truncated route")
    count = buf[off]
    off += 1
    hops = []
    for _ in range(count):
        cn, off = _unpack_cn(buf, off)
        hops.append(cn)
    return tuple(hops), off


@dataclass(frozen=True)
class ConnectionOrder:
    """Commander's instruction to the client end of a new link."""

    client_cn: str
    server_cn: str
    server_ip: str
    tls_port: int
    udp_port: int
    credential: Credential
    route: tuple[str, ...] = ()
    capacity_bps: int = 0  # narrowband hint for freshness calibration

    def to_bytes(self) -> bytes:
        cred = self.credential.to_bytes()
        return (
            _pack_cn(self.client_cn)
            + _pack_cn(self.server_cn)
            + ipaddress.IPv4Address(self.server_ip).packed
            + struct.pack("!HHI", self.tls_port, self.udp_port, self.capacity_bps)
            + struct.pack("!H", len(cred))
            + cred
            + _pack_route(self.route)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "ConnectionOrder":
        client_cn, off = _unpack_cn(data, 0)
        server_cn, off = _unpack_cn(data, off)
        if off + 14 > len(data):
            raise ValueError("truncated order")
        server_ip = str(ipaddress.IPv4Address(data[off:off + 4]))
        tls_port, udp_port, capacity = struct.unpack_from("!HHI", data, off + 4)
        (cred_len,) = struct.unpack_from("!H", data, off + 12)
        off += 14
        if off + cred_len > len(data):
            raise ValueError("truncated credential")
        credential = Credential.from_bytes(data[off:off + cred_len])
        route, off = _unpack_route(data, off + cred_len)
        if off != len(data):
            raise ValueError("trailing bytes in order")
        return cls(client_cn, server_cn, server_ip, tls_port, udp_port,
                   credential, route, capacity)

    def next_hop(self) -> "ConnectionOrder":
        return ConnectionOrder(self.client_cn, self.server_cn, self.server_ip,
                               self.tls_port, self.udp_port, self.credential,
                               self.route[1:], self.capacity_bps)


@dataclass(frozen=True)
class CredentialUpdate:
    """Replacement credential in flight to a named node."""

    target_cn: str
    credential: Credential
    route: tuple[str, ...] = ()

    def to_bytes(self) -> bytes:
        cred = self.credential.to_bytes()
        return (_pack_cn(self.target_cn) + struct.pack("!H", len(cred)) + cred
                + _pack_route(self.route))

    @classmethod
    def from_bytes(cls, data: bytes) -> "CredentialUpdate":
        target_cn, off = _unpack_cn(data, 0)
        if off + 2 > len(data):
            raise ValueError("truncated update")
        (cred_len,) = struct.unpack_from("!H", data, off)
        off += 2
        if off + cred_len > len(data):
            raise ValueError("truncated credential")
        credential = Credential.from_bytes(data[off:off + cred_len])
        route, off = _unpack_route(data, off + cred_len)
        if off != len(data):
            raise ValueError("trailing bytes in update")
        return cls(target_cn, credential, route)

    def next_hop(self) -> "CredentialUpdate":
        return CredentialUpdate(self.target_cn, self.credential, self.route[1:])


# ---------------------------------------------------------------------------
# session state


@dataclass
class SessionState:
    peer: NodeIdentity
    peer_cert: Certificate
    credential: Credential
    renewal: ks.RenewalState
    master: ks.MasterSecret
    clock_offset_ms: int
    expected_age_base_ms: int
    expected_age_per_byte: float
    replay: wire.ReplayWindow
    udp_local: tuple[str, int]
    udp_peer: tuple[str, int]
    is_client: bool
    link_type: int
    capacity_bps: int
    key_established_ms: int
    phase: Phase = Phase.ESTABLISHED
    close_reason: str | None = None
    established_ms: int = 0
    last_seen_ms: int = 0
    counters: dict = field(default_factory=dict)
    step_log: list = field(default_factory=list)

    @property
    def narrowband(self) -> bool:
        return 0 < self.capacity_bps < NARROWBAND_THRESHOLD_BPS

    def expected_age_for(self, size: int) -> int:
        return self.expected_age_base_ms + int(self.expected_age_per_byte * size)

    def bump(self, counter: str) -> None:
        self.counters[counter] = self.counters.get(counter, 0) + 1


@dataclass
class RlStore:
    """Node-wide revocation list state shared by its sessions."""

    cert_rl: object
    cred_rl: object


class Services:
    """Node-supplied environment: clock, CPU, timers, RNG, event sink."""

    def __init__(self, *, now_ms, work, schedule, rng, event=None, report_outcome=None):
        self.now_ms = now_ms
        self.work = work
        self.schedule = schedule
        self.rng = rng
        self.event = event or (lambda name, **fields: None)
        self.report_outcome = report_outcome or (lambda meta, ok, detail="": None)


# ---------------------------------------------------------------------------
# establishment, client side


class Establisher:
    """Runs the establishment steps as the connection's client.

    ``on_done`` receives either a SessionState or a Failure. Handshake-step
    failures are retried on a fixed spacing; any later step is final, since
    by then both ends have spoken and a retry would hit the same verdict.
    """

    def __init__(
        self,
        order: ConnectionOrder,
        bundle: ConfigBundle,
        rls: RlStore,
        host,
        services: Services,
        udp_bind: Callable[[], tuple[object, int]],
        on_done: Callable[[object], None],
    ):
        self.order = order
        self.bundle = bundle
        self.rls = rls
        self.host = host
        self.sv = services
        self.udp_bind = udp_bind
        self.on_done = on_done
        self.attempts = 0
        self.step_log: list[int] = []
        self.result = None
        self.udp_sock = None
        self._chan: chan.SecureChannel | None = None
        self._conn = None
        self._t1 = 0
        self._round = 0
        self._age_s2c: int | None = None
        self._offset: int | None = None
        self._keys = None
        self._udp_port = 0

    def start(self) -> None:
        self.sv.event("EstStart", peer=self.order.server_cn)
        self._attempt()

    def _attempt(self) -> None:
        self.attempts += 1
        self._round = 0
        self._age_s2c = None
        self._chan = chan.SecureChannel(
            is_client=True,
            rng=self.sv.rng,
            node_key=self.bundle.own_private_key,
            own_cert_der=self.bundle.own_certificate.der,
            verify_peer=self._verify_server_cert,
            work=self.sv.work,
            schedule=self.sv.schedule,
            on_ready=self._on_ready,
            on_record=self._on_record,
            on_fail=self._on_chan_fail,
        )
        self._conn = self.host.connect_stream(
            (self.order.server_ip, self.order.tls_port),
            on_open=None, on_data=None, on_close=None)
        self._chan.bind(self._conn)

    def _verify_server_cert(self, cert: Certificate) -> Verdict:
        expected = NodeIdentity(self.order.server_cn, self.order.server_ip,
                                cert.role or Role.UXV)
        verdict = verify_certificate(cert, self.bundle.ca_certificate,
                                     self.rls.cert_rl, self.sv.now_ms(), expected)
        if verdict:
            self.step_log.append(chan.STEP_CERTIFICATE)
        return verdict

    def _on_chan_fail(self, _c, failure: Failure) -> None:
        if failure.step == chan.STEP_HANDSHAKE and self.attempts <= ESTABLISH_RETRIES:
            self.sv.schedule(ESTABLISH_RETRY_SPACING_MS, self._attempt)
            return
        self._finish(failure)

    def _on_ready(self, c: chan.SecureChannel) -> None:
        self.step_log.append(STEP_CREDENTIAL)
        c.send_records([(chan.R_CRED, self.order.credential.to_bytes())])

    def _on_record(self, c: chan.SecureChannel, rtype: int, body: bytes) -> None:
        if rtype == chan.R_CRED_OK:
            self._send_clock_probe(c)
        elif rtype == chan.R_NTP_RESP and len(body) == 25:
            self._on_clock_reply(c, body)
        elif rtype == chan.R_DONE:
            self._on_done_record(c)

    def _send_clock_probe(self, c: chan.SecureChannel) -> None:
        self._round += 1
        self._t1 = self.sv.now_ms()
        c.send_records([(chan.R_NTP_REQ,
                         bytes([self._round]) + self._t1.to_bytes(8, "big"))])

    def _on_clock_reply(self, c: chan.SecureChannel, body: bytes) -> None:
        rnd = body[0]
        t1 = int.from_bytes(body[1:9], "big")
        t2 = int.from_bytes(body[9:17], "big")
        t3 = int.from_bytes(body[17:25], "big")
        if rnd != self._round or t1 != self._t1:
            return

        def done() -> None:
            if c.failed is not None:
                return
            t4 = self.sv.now_ms()
            age = t4 - t3
            if self._age_s2c is None or age < self._age_s2c:
                self._age_s2c = age
                self._offset = ((t2 - t1) + (t3 - t4)) // 2
            if self._round < 2:
                self._send_clock_probe(c)
            else:
                self.step_log.append(STEP_CLOCK)
                self.sv.work(COST_MASTER_ECDH_MS + COST_KDF_MS,
                             lambda: self._derive_keys(c))

        self.sv.work(COST_CLOCK_SYNC_MS, done)

    def _derive_keys(self, c: chan.SecureChannel) -> None:
        if c.failed is not None:
            return
        master = ks.ecdh_master(self.bundle.own_private_key,
                                c.peer_cert.public_key(),
                                established_at=self.sv.now_ms())
        pk_client = crypto.point_bytes(self.bundle.own_private_key.public_key())
        pk_server = c.peer_cert.public_point()
        keys = ks.derive_session_keys(master, pk_client, pk_server)
        self.step_log.append(STEP_KEYS)
        self._keys = (master, keys)
        self.udp_sock, self._udp_port = self.udp_bind()
        c.send_records([(chan.R_PORT,
                         _PORT_BODY.pack(self._udp_port, self.order.capacity_bps))])
        self.step_log.append(STEP_UDP)

    def _on_done_record(self, c: chan.SecureChannel) -> None:
        if self._keys is None:
            return

        def finish() -> None:
            if c.failed is not None:
                return
            master, keys = self._keys
            now = self.sv.now_ms()
            per_byte = _per_byte_ms(self.order.capacity_bps)
            base = (self._age_s2c or 0) - int(per_byte * _NTP_RESP_WIRE)
            state = SessionState(
                peer=c.peer_cert.subject_identity(),
                peer_cert=c.peer_cert,
                credential=self.order.credential,
                renewal=ks.initial_state(keys),
                master=master,
                clock_offset_ms=self._offset or 0,
                expected_age_base_ms=base,
                expected_age_per_byte=per_byte,
                replay=wire.ReplayWindow(),
                udp_local=(self.host.ip, self._udp_port),
                udp_peer=(self.order.server_ip, self.order.udp_port),
                is_client=True,
                link_type=self.order.credential.link_type,
                capacity_bps=self.order.capacity_bps,
                key_established_ms=now,
                established_ms=now,
                last_seen_ms=now,
            )
            state.step_log = self.step_log
            c.close()
            self.sv.event("EstDone", peer=self.order.server_cn)
            self._finish(state)

        self.sv.work(COST_SESSION_SETUP_MS, finish)

    def _finish(self, result) -> None:
        if self.result is None:
            self.result = result
            self.on_done(result)


# ---------------------------------------------------------------------------
# establishment, server side


class Acceptor:
    """Server half of establishment, one per inbound control connection."""

    def __init__(
        self,
        conn,
        peer_ip: str,
        bundle: ConfigBundle,
        rls: RlStore,
        host,
        services: Services,
        on_done: Callable[[object], None],
    ):
        self.conn = conn
        self.peer_ip = peer_ip
        self.bundle = bundle
        self.rls = rls
        self.host = host
        self.sv = services
        self.on_done = on_done
        self.step_log: list[int] = []
        self.result = None
        self.credential: Credential | None = None
        self._age_c2s: int | None = None
        self.sv.event("EstStart", peer=peer_ip)
        self._chan = chan.SecureChannel(
            is_client=False,
            rng=services.rng,
            node_key=bundle.own_private_key,
            own_cert_der=bundle.own_certificate.der,
            verify_peer=self._verify_client_cert,
            work=services.work,
            schedule=services.schedule,
            on_record=self._on_record,
            on_fail=lambda _c, f: self._finish(f),
        )
        self._chan.bind(conn)

    def _verify_client_cert(self, cert: Certificate) -> Verdict:
        expected = NodeIdentity(cert.common_name, self.peer_ip,
                                cert.role or Role.UXV)
        verdict = verify_certificate(cert, self.bundle.ca_certificate,
                                     self.rls.cert_rl, self.sv.now_ms(), expected)
        if verdict:
            self.step_log.append(chan.STEP_CERTIFICATE)
        return verdict

    def _on_record(self, c: chan.SecureChannel, rtype: int, body: bytes) -> None:
        if rtype == chan.R_CRED:
            self._on_credential(c, body)
        elif rtype == chan.R_NTP_REQ and len(body) == 9:
            self._on_clock_probe(c, body)
        elif rtype == chan.R_PORT and len(body) == _PORT_BODY.size:
            self._on_port(c, body)

    def _on_credential(self, c: chan.SecureChannel, body: bytes) -> None:
        def verify() -> None:
            if c.failed is not None:
                return
            try:
                cred = Credential.from_bytes(body)
            except ValueError:
                c.abort(STEP_CRED_VERIFY, "MalformedCredential")
                return
            try:
                link_ctx = link_type_for(c.peer_cert.role, self.bundle.identity.role)
            except ValueError:
                c.abort(STEP_CRED_VERIFY, "WrongLinkType")
                return
            verdict = verify_credential(
                cred, self.rls.cred_rl, self.sv.now_ms(),
                crypto.point_from_bytes(self.bundle.tc1_public_key),
                expected_client=c.peer_cert.public_point(),
                expected_server=crypto.point_bytes(
                    self.bundle.own_private_key.public_key()),
                link_ctx=link_ctx,
            )
            if not verdict:
                c.abort(STEP_CRED_VERIFY, verdict.reason)
                return
            self.credential = cred
            self.step_log.append(STEP_CRED_VERIFY)
            c.send_records([(chan.R_CRED_OK, b"")])

        self.sv.work(COST_CRED_VERIFY_MS, verify)

    def _on_clock_probe(self, c: chan.SecureChannel, body: bytes) -> None:
        t2 = self.sv.now_ms()
        rnd = body[0]
        t1 = int.from_bytes(body[1:], "big")
        age = t2 - t1
        if self._age_c2s is None or age < self._age_c2s:
            self._age_c2s = age

        def respond() -> None:
            if c.failed is not None:
                return
            t3 = self.sv.now_ms()
            c.send_records([(chan.R_NTP_RESP,
                             bytes([rnd]) + t1.to_bytes(8, "big")
                             + t2.to_bytes(8, "big") + t3.to_bytes(8, "big"))])
            if rnd >= 2:
                self.step_log.append(STEP_CLOCK)

        self.sv.work(COST_CLOCK_SYNC_MS, respond)

    def _on_port(self, c: chan.SecureChannel, body: bytes) -> None:
        if self.credential is None:
            c.abort(STEP_UDP, "PortBeforeCredential")
            return
        port, capacity = _PORT_BODY.unpack(body)

        def derive() -> None:
            if c.failed is not None:
                return
            master = ks.ecdh_master(self.bundle.own_private_key,
                                    c.peer_cert.public_key(),
                                    established_at=self.sv.now_ms())
            pk_client = c.peer_cert.public_point()
            pk_server = crypto.point_bytes(self.bundle.own_private_key.public_key())
            keys = ks.derive_session_keys(master, pk_client, pk_server)
            self.step_log.append(STEP_KEYS)
            self.sv.work(COST_SESSION_SETUP_MS, lambda: setup(master, keys))

        def setup(master, keys) -> None:
            if c.failed is not None:
                return
            now = self.sv.now_ms()
            per_byte = _per_byte_ms(capacity)
            base = (self._age_c2s or 0) - int(per_byte * _NTP_REQ_WIRE)
            state = SessionState(
                peer=c.peer_cert.subject_identity(),
                peer_cert=c.peer_cert,
                credential=self.credential,
                renewal=ks.initial_state(keys),
                master=master,
                clock_offset_ms=0,
                expected_age_base_ms=base,
                expected_age_per_byte=per_byte,
                replay=wire.ReplayWindow(),
                udp_local=(self.host.ip, self.bundle.udp_port),
                udp_peer=(self.peer_ip, port),
                is_client=False,
                link_type=self.credential.link_type,
                capacity_bps=capacity,
                key_established_ms=now,
                established_ms=now,
                last_seen_ms=now,
            )
            state.step_log = self.step_log
            self.step_log.append(STEP_UDP)
            c.send_records([(chan.R_DONE, b"")])
            self.sv.event("EstDone", peer=state.peer.common_name)
            self._finish(state)

        self.sv.work(COST_MASTER_ECDH_MS + COST_KDF_MS, derive)

    def _finish(self, result) -> None:
        if self.result is None:
            self.result = result
            self.on_done(result)


# ---------------------------------------------------------------------------
# established-session runtime


class Session:
    """Datagram pipeline and renewal driver for one established link."""

    def __init__(
        self,
        state: SessionState,
        bundle: ConfigBundle,
        policy: pol.CapacityPolicy,
        rls: RlStore,
        sock,
        services: Services,
        key_lifetime_ms: int | None = None,
        dispatch: Callable[["Session", wire.Nc2sMessage, dict | None], None] | None = None,
        on_rl_payload: Callable[["Session", int, bytes], None] | None = None,
        on_closed: Callable[["Session", str], None] | None = None,
    ):
        self.state = state
        self.bundle = bundle
        self.policy = policy
        self.rls = rls
        self.sock = sock
        self.sv = services
        self.key_lifetime_ms = key_lifetime_ms or bundle.key_lifetime_ms
        self.dispatch = dispatch or (lambda s, m, meta: None)
        self.on_rl_payload = on_rl_payload or (lambda s, t, p: None)
        self.on_closed = on_closed or (lambda s, r: None)
        self._renew_timer = None
        self._renew_tries = 0
        self._dual_timer = None
        self._pacer_free_ms = 0.0
        self._last_sent_ts = 0

    @property
    def peer_cn(self) -> str:
        return self.state.peer.common_name

    # sending

    def _flow_direction(self, sender_is_client: bool) -> pol.Direction:
        return pol.Direction.SEND if sender_is_client else pol.Direction.RECV

    def send_message(self, msg_type: int, payload: bytes = b"") -> bool:
        st = self.state
        if st.phase is not Phase.ESTABLISHED:
            return False
        if not pol.authorize(self.policy, st.credential, msg_type,
                             self._flow_direction(st.is_client)):
            st.bump("send_blocked")
            self.sv.event("MsgDropped", reason="Unauthorized", local=True,
                          msg_type=msg_type, peer=self.peer_cn)
            return False
        key = ks.send_key(st.renewal, server_side=not st.is_client)
        return self._queue_send(msg_type, payload, key)

    def _queue_send(self, msg_type: int, payload: bytes, key: bytes) -> bool:
        st = self.state
        if not st.narrowband:
            self._emit(msg_type, payload, key)
            return True
        # pace narrowband sends so queued bursts stay fresh on arrival
        now = float(self.sv.now_ms())
        start = max(now, self._pacer_free_ms)
        if start - now > PACER_MAX_DELAY_MS:
            st.bump("backpressure")
            self.sv.event("MsgDropped", reason="Backpressure", local=True,
                          msg_type=msg_type, peer=self.peer_cn)
            return False
        size = wire.HEADER_LEN + len(payload) + wire.TRAILER_LEN
        self._pacer_free_ms = start + size * 8_000.0 / st.capacity_bps
        if start <= now:
            self._emit(msg_type, payload, key)
        else:
            self.sv.schedule(start - now, lambda: self._emit(msg_type, payload, key))
        return True

    def _emit(self, msg_type: int, payload: bytes, key: bytes) -> None:
        st = self.state
        if st.phase is not Phase.ESTABLISHED:
            return
        # timestamps double as replay-dedup identity at the receiver, so two
        # datagrams must never carry the same stamp even within one ms
        ts = max(self.sv.now_ms(), self._last_sent_ts + 1)
        self._last_sent_ts = ts
        data = wire.encode(msg_type, payload, ts, key)
        self.sock.sendto(data, st.udp_peer)
        self.sv.event("MsgSent", msg_type=msg_type, bytes=len(data),
                      peer=self.peer_cn, sent_t=ts)

    # receiving

    def handle_datagram(self, data: bytes, meta: dict | None = None):
        st = self.state
        if st.phase is not Phase.ESTABLISHED:
            return wire.Reject.MALFORMED
        keys = ks.receive_keys(st.renewal, server_side=not st.is_client)
        now = self.sv.now_ms()
        result = wire.decode_and_verify(
            data, keys, st.replay, now,
            expected_age_ms=st.expected_age_for(len(data)))
        if isinstance(result, wire.Reject):
            st.bump(result.value)
            self.sv.event("MsgDropped", reason=result.value, peer=self.peer_cn)
            self.sv.report_outcome(meta, False, result.value)
            return result
        msg = result.message
        if (not st.is_client and st.renewal.phase is ks.Phase.SERVER_DUAL_KEY
                and result.key_index == 1):
            # first datagram under the new keys confirms the renewal
            st.renewal = ks.server_confirm(st.renewal)
            st.key_established_ms = now
            self._cancel_dual_timer()
            self.sv.event("RenewDone", side="server", peer=self.peer_cn)
        if not pol.authorize(self.policy, st.credential, msg.msg_type,
                             self._flow_direction(not st.is_client)):
            st.bump("Unauthorized")
            self.sv.event("MsgDropped", reason="Unauthorized",
                          msg_type=msg.msg_type, peer=self.peer_cn)
            self.sv.report_outcome(meta, False, "Unauthorized")
            return "Unauthorized"
        st.last_seen_ms = now
        self.sv.report_outcome(meta, True, wire.MESSAGE_TYPES[msg.msg_type])
        self.sv.event("MsgRecv", msg_type=msg.msg_type, bytes=len(data),
                      peer=self.peer_cn, sent_t=msg.timestamp)
        if msg.msg_type == wire.KEY_RENEWAL_REQ and not st.is_client:
            self.sv.work(COST_RENEWAL_MS, self._serve_renewal)
        elif (msg.msg_type == wire.KEY_RENEWAL_NONCE and st.is_client
              and len(msg.payload) == ks.NONCE_LEN):
            self.sv.work(COST_KDF_MS, lambda: self._apply_nonce(msg.payload))
        elif msg.msg_type in (wire.CERTRL_UPDATE, wire.CREDRL_UPDATE):
            self.on_rl_payload(self, msg.msg_type, msg.payload)
        else:
            self.dispatch(self, msg, meta)
        return msg

    # renewal

    def maybe_start_renewal(self) -> bool:
        st = self.state
        if (not st.is_client or st.phase is not Phase.ESTABLISHED
                or st.renewal.phase is not ks.Phase.NORMAL):
            return False
        if not ks.renewal_due(st.key_established_ms, self.key_lifetime_ms,
                              self.sv.now_ms()):
            return False
        st.renewal = ks.mark_client_requested(st.renewal)
        self._renew_tries = 0
        self.sv.event("RenewReqSent", peer=self.peer_cn)
        self._send_renewal_request()
        return True

    def _send_renewal_request(self) -> None:
        st = self.state
        if (st.phase is not Phase.ESTABLISHED
                or st.renewal.phase is not ks.Phase.CLIENT_REQUESTED):
            return
        if self._renew_tries >= ks.RENEWAL_MAX_TRIES:
            # give up; a later renewal pass may try again from scratch
            st.renewal = ks.RenewalState(ks.Phase.NORMAL, st.renewal.keys,
                                         nonce=st.renewal.nonce)
            self.sv.event("RenewFailed", peer=self.peer_cn)
            return
        self._renew_tries += 1
        self.send_message(wire.KEY_RENEWAL_REQ)
        self._renew_timer = self.sv.schedule(ks.RENEWAL_RETRY_MS,
                                             self._send_renewal_request)

    def _serve_renewal(self) -> None:
        st = self.state
        if st.phase is not Phase.ESTABLISHED:
            return
        nonce, st.renewal = ks.server_begin_renewal(
            st.renewal, st.master,
            pk_client=st.peer_cert.public_point(),
            pk_server=crypto.point_bytes(self.bundle.own_private_key.public_key()),
            rng=self.sv.rng,
            dual_deadline=st.key_established_ms + self.key_lifetime_ms,
        )
        if (st.renewal.phase is ks.Phase.SERVER_DUAL_KEY
                and self._dual_timer is None and st.renewal.dual_deadline):
            remaining = max(0, st.renewal.dual_deadline - self.sv.now_ms())
            self._dual_timer = self.sv.schedule(remaining, self._expire_dual)
        # the nonce itself must ride the old key: the client cannot derive
        # the new one until this datagram is verified and read
        self._queue_send(wire.KEY_RENEWAL_NONCE, nonce, st.renewal.keys.s2c)

    def _apply_nonce(self, nonce: bytes) -> None:
        st = self.state
        if st.phase is not Phase.ESTABLISHED:
            return
        before = st.renewal.keys
        st.renewal = ks.client_apply_nonce(
            st.renewal, st.master,
            pk_client=crypto.point_bytes(self.bundle.own_private_key.public_key()),
            pk_server=st.peer_cert.public_point(),
            nonce=nonce,
        )
        if st.renewal.keys != before:
            st.key_established_ms = self.sv.now_ms()
            self._cancel_renew_timer()
            self.sv.event("RenewDone", side="client", peer=self.peer_cn)

    def _expire_dual(self) -> None:
        st = self.state
        self._dual_timer = None
        if st.renewal.phase is ks.Phase.SERVER_DUAL_KEY:
            st.renewal = ks.expire_dual(st.renewal)
            st.key_established_ms = self.sv.now_ms()

    def _cancel_renew_timer(self) -> None:
        if self._renew_timer is not None:
            self._renew_timer.cancel()
            self._renew_timer = None

    def _cancel_dual_timer(self) -> None:
        if self._dual_timer is not None:
            self._dual_timer.cancel()
            self._dual_timer = None

    # credential update and teardown

    def apply_credential_update(self, new_cred: Credential) -> Verdict:
        st = self.state
        old = st.credential
        if (new_cred.pk_client, new_cred.pk_server) != (old.pk_client, old.pk_server):
            st.bump("cred_update_rejected")
            return reject("KeyMismatch")
        tc1_pub = crypto.point_from_bytes(self.bundle.tc1_public_key)
        verdict = verify_credential(new_cred, self.rls.cred_rl, self.sv.now_ms(),
                                    tc1_pub, old.pk_client, old.pk_server,
                                    link_ctx=old.link_type)
        if not verdict:
            st.bump("cred_update_rejected")
            return verdict
        st.credential = new_cred
        self.sv.event("CredUpdateApplied", peer=self.peer_cn, cap=new_cred.cap)
        return verdict

    def close(self, reason: str) -> None:
        st = self.state
        if st.phase is Phase.CLOSED:
            return
        st.phase = Phase.CLOSED
        st.close_reason = reason
        self._cancel_renew_timer()
        self._cancel_dual_timer()
        self.sv.event("SessionClosed", reason=reason, peer=self.peer_cn)
        self.on_closed(self, reason)
