"""Role runtimes: CT1, CT2, GCS and UxV processing loops.

Each node is one logical CPU (``NodeRuntime``): charged work items run
serialized in submission order, so a credential signing delays datagram
processing on the same node exactly as it would on a single-core proxy.

Shared behavior lives in ``Node``: accepting and initiating establishment,
per-datagram processing charges, revocation-list adoption and rebroadcast,
and hop-by-hop forwarding of routed order/credential envelopes. Role
subclasses add the commander surface (CT1), report aggregation (CT2),
telemetry passthrough with the narrowband filter (GCS), and the stub
autopilot (UxV).
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

import random

from . import artifacts, crypto, policy as pol, session as sess_mod, wire
from .artifacts import Role

# single-CPU processing charge per received datagram, by role
PROC_COST_MS = {
    Role.CT1: 2.62,
    Role.CT2: 2.62,
    Role.GCS: 2.69,
    Role.UXV: 1.02,
    Role.CA: 2.62,
}

COST_SIGN_MS = 20.0          # credential or revocation-list signature
COST_RL_APPLY_MS = 8.0       # verify + store + match against sessions
COST_CRED_UPDATE_MS = 6.0    # verify + swap a session credential

REPORT_INTERVAL_MS = 5_000
AGGREGATE_INTERVAL_MS = 5_000
RENEWAL_CHECK_INTERVAL_MS = 1_000
ARTIFACT_CHECK_INTERVAL_MS = 10_000
ARTIFACT_RENEW_FRACTION = 0.8
FILTER_INTERVAL_MS = 10_000
DEFAULT_RL_LIFETIME_MS = 7 * artifacts.DAY_MS
DEFAULT_CRED_LIFETIME_MS = artifacts.DAY_MS

OPERATOR_MTU = 1500

_ORDER_TYPE_BY_ROLE = {
    Role.CT2: wire.ORDER_CT2,
    Role.GCS: wire.ORDER_GCS,
    Role.UXV: wire.ORDER_UXV,
}
_CRED_UPDATE_TYPE_BY_ROLE = {
    Role.CT2: wire.CRED_UPDATE_CT2,
    Role.GCS: wire.CRED_UPDATE_GCS,
    Role.UXV: wire.CRED_UPDATE_UXV,
}


class NodeRuntime:
    """Serializing compute model: one CPU, FIFO work queue, charged in ms."""

    def __init__(self, engine):
        self.engine = engine
        self._free_at_us = 0
        self.jobs = 0
        self.busy_us = 0
        self.waited_us = 0

    def submit(self, cost_ms: float, fn: Callable[[], None]):
        now = self.engine.now_us
        start = max(now, self._free_at_us)
        cost_us = int(cost_ms * 1000)
        self._free_at_us = start + cost_us
        self.jobs += 1
        self.busy_us += cost_us
        self.waited_us += start - now
        return self.engine.at(self._free_at_us, fn)

    @property
    def backlog_ms(self) -> float:
        return max(0, self._free_at_us - self.engine.now_us) / 1000.0


class _Repeat:
    """Self-rescheduling timer holding exactly one live handle."""

    def __init__(self, engine, interval_ms: float, fn: Callable[[], None]):
        self.engine = engine
        self.interval_ms = interval_ms
        self.fn = fn
        self.stopped = False
        self._timer = engine.after_ms(interval_ms, self._tick)

    def _tick(self) -> None:
        if self.stopped:
            return
        self.fn()
        if not self.stopped:
            self._timer = self.engine.after_ms(self.interval_ms, self._tick)

    def cancel(self) -> None:
        self.stopped = True
        self._timer.cancel()


# --- telemetry frames -------------------------------------------------------

_MAV_MAGIC = 0xFE
MSG_HEARTBEAT = 0
MSG_GPS = 33
MSG_BULK = 66
MSG_ACK = 77

_FRAME_HDR = struct.Struct("<BBBBBB")  # magic, len, seq, sysid, compid, msgid


class FrameCategory(Enum):
    HEARTBEAT = "Heartbeat"
    GPS = "Gps"
    OTHER = "Other"


def build_frame(msg_id: int, payload: bytes, seq: int, system_id: int = 1) -> bytes:
    if len(payload) > 255:
        raise ValueError("frame payload exceeds one length byte")
    body = _FRAME_HDR.pack(_MAV_MAGIC, len(payload), seq & 0xFF, system_id, 1, msg_id)
    body += payload
    return body + struct.pack("<H", sum(body) & 0xFFFF)


def classify_frame(frame: bytes) -> FrameCategory:
    """Header-only classification; anything unparseable is OTHER."""
    if len(frame) < _FRAME_HDR.size or frame[0] != _MAV_MAGIC:
        return FrameCategory.OTHER
    msg_id = frame[5]
    if msg_id == MSG_HEARTBEAT:
        return FrameCategory.HEARTBEAT
    if msg_id == MSG_GPS:
        return FrameCategory.GPS
    return FrameCategory.OTHER


def radio_filter(frame: bytes, now_ms: int, last_sent: dict,
                 interval_ms: int = FILTER_INTERVAL_MS, *,
                 narrowband: bool = True) -> bool:
    """Forward decision for one telemetry frame toward a commander link.

    Broadband links forward everything. On narrowband links only heartbeat
    and position frames pass, each at most once per interval; ``last_sent``
    carries the per-category send times between calls and is updated on
    every Forward decision.
    """
    if not narrowband:
        return True
    category = classify_frame(frame)
    if category is FrameCategory.OTHER:
        return False
    last = last_sent.get(category)
    if last is not None and now_ms - last < interval_ms:
        return False
    last_sent[category] = now_ms
    return True


class StubAutopilot:
    """Deterministic telemetry source shaped like a flight-controller feed.

    Emits heartbeats at 1 Hz, position at 1 Hz and bulk frames sized so the
    aggregate stream sits near 32 kb/s; commands fed in are acknowledged
    back out through the same stream.
    """

    def __init__(self, engine, on_frame: Callable[[bytes], None], *,
                 heartbeat_hz: float = 1.0, gps_hz: float = 1.0,
                 bulk_hz: float = 15.2, bulk_payload: int = 255):
        self.engine = engine
        self.on_frame = on_frame
        self.rates = {
            MSG_HEARTBEAT: heartbeat_hz,
            MSG_GPS: gps_hz,
            MSG_BULK: bulk_hz,
        }
        self.bulk_payload = bulk_payload
        self.commands: list[bytes] = []
        self._seq = 0
        self._gps_ticks = 0
        self._timers: list[_Repeat] = []

    def start(self) -> None:
        for msg_id, hz in self.rates.items():
            if hz > 0:
                self._timers.append(
                    _Repeat(self.engine, 1000.0 / hz, lambda m=msg_id: self._emit(m)))

    def stop(self) -> None:
        for timer in self._timers:
            timer.cancel()
        self._timers.clear()

    def handle_command(self, frame: bytes) -> None:
        self.commands.append(frame)
        self._send(build_frame(MSG_ACK, struct.pack("<HB", len(self.commands) & 0xFFFF, 0),
                               self._seq))

    def _emit(self, msg_id: int) -> None:
        if msg_id == MSG_HEARTBEAT:
            payload = struct.pack("<IBBBBB", self._seq, 2, 3, 81, 4, 3)
        elif msg_id == MSG_GPS:
            self._gps_ticks += 1
            t = self._gps_ticks
            payload = struct.pack("<Iiiiihhhh", t * 1000, 38_736_000 + t,
                                  -9_138_000 - t, 120_000, 80_000, 5, -3, 1, 900)
        else:
            payload = bytes((self._seq + i) % 251 for i in range(self.bulk_payload))
        self._send(build_frame(msg_id, payload, self._seq))

    def _send(self, frame: bytes) -> None:
        self._seq = (self._seq + 1) & 0xFF
        self.on_frame(frame)


# --- network map ------------------------------------------------------------


@dataclass(frozen=True)
class MapEntry:
    uxv_cn: str
    gcs_cn: str
    last_seen_ms: int


def encode_map_report(reporter_cn: str, entries: Sequence[tuple[str, int]]) -> bytes:
    if len(entries) > 255:
        raise ValueError("too many entries for one report")
    out = [sess_mod._pack_cn(reporter_cn), bytes([len(entries)])]
    for cn, seen in entries:
        out.append(sess_mod._pack_cn(cn))
        out.append(struct.pack("!Q", seen))
    return b"".join(out)


def decode_map_report(payload: bytes) -> tuple[str, list[tuple[str, int]]]:
    reporter, off = sess_mod._unpack_cn(payload, 0)
    if off >= len(payload):
        raise ValueError("truncated report")
    count = payload[off]
    off += 1
    entries = []
    for _ in range(count):
        cn, off = sess_mod._unpack_cn(payload, off)
        if off + 8 > len(payload):
            raise ValueError("truncated report entry")
        (seen,) = struct.unpack_from("!Q", payload, off)
        off += 8
        entries.append((cn, seen))
    if off != len(payload):
        raise ValueError("trailing bytes after report")
    return reporter, entries


def encode_map_aggregate(reporters: Sequence[str],
                         entries: Sequence[MapEntry]) -> bytes:
    if len(reporters) > 255 or len(entries) > 255:
        raise ValueError("aggregate too large")
    out = [bytes([len(reporters)])]
    out += [sess_mod._pack_cn(cn) for cn in reporters]
    out.append(bytes([len(entries)]))
    for e in entries:
        out.append(sess_mod._pack_cn(e.uxv_cn))
        out.append(sess_mod._pack_cn(e.gcs_cn))
        out.append(struct.pack("!Q", e.last_seen_ms))
    return b"".join(out)


def decode_map_aggregate(payload: bytes) -> tuple[list[str], list[MapEntry]]:
    if not payload:
        raise ValueError("empty aggregate")
    off = 1
    reporters = []
    for _ in range(payload[0]):
        cn, off = sess_mod._unpack_cn(payload, off)
        reporters.append(cn)
    if off >= len(payload):
        raise ValueError("truncated aggregate")
    count = payload[off]
    off += 1
    entries = []
    for _ in range(count):
        uxv, off = sess_mod._unpack_cn(payload, off)
        gcs, off = sess_mod._unpack_cn(payload, off)
        if off + 8 > len(payload):
            raise ValueError("truncated aggregate entry")
        (seen,) = struct.unpack_from("!Q", payload, off)
        off += 8
        entries.append(MapEntry(uxv, gcs, seen))
    if off != len(payload):
        raise ValueError("trailing bytes after aggregate")
    return reporters, entries


def map_aggregate(
    reports: Iterable[tuple[str, Sequence[tuple[str, int]]]]
) -> tuple[list[str], list[MapEntry]]:
    """Union per-GCS reports into one view; newest sighting per UxV wins."""
    reporters: list[str] = []
    best: dict[str, MapEntry] = {}
    for reporter, entries in reports:
        reporters.append(reporter)
        for uxv, seen in entries:
            cur = best.get(uxv)
            if cur is None or seen >= cur.last_seen_ms:
                best[uxv] = MapEntry(uxv, reporter, seen)
    return sorted(reporters), [best[k] for k in sorted(best)]


# --- artifact renewal schedule ---------------------------------------------


def _aged(t_start: int, t_end: int, now: int, fraction: float) -> bool:
    span = t_end - t_start
    return span > 0 and now - t_start >= fraction * span


def renewal_actions(credentials: Iterable[tuple[object, artifacts.Credential]],
                    certificates: Iterable[tuple[object, artifacts.Certificate]],
                    cert_rl: artifacts.CertRl | None,
                    cred_rl: artifacts.CredRl | None,
                    now: int,
                    threshold: float = ARTIFACT_RENEW_FRACTION) -> list[tuple]:
    """Which artifacts have burned through ``threshold`` of their lifetime.

    Returns ``("credential", tag)``, ``("certificate", tag)``, ``("certrl",
    None)`` and ``("credrl", None)`` action tuples; the caller re-issues.
    """
    actions: list[tuple] = []
    for tag, cred in credentials:
        if _aged(cred.t_iss, cred.t_exp, now, threshold):
            actions.append(("credential", tag))
    for tag, cert in certificates:
        if _aged(cert.not_before_ms, cert.not_after_ms, now, threshold):
            actions.append(("certificate", tag))
    if cert_rl is not None and _aged(cert_rl.t_iss, cert_rl.t_exp, now, threshold):
        actions.append(("certrl", None))
    if cred_rl is not None and _aged(cred_rl.t_iss, cred_rl.t_exp, now, threshold):
        actions.append(("credrl", None))
    return actions


# --- the common node loop ---------------------------------------------------


class Node:
    """One role instance: sessions, establishment, RLs, routed envelopes."""

    role: Role = Role.CA

    def __init__(self, bundle: artifacts.ConfigBundle, host, engine, *,
                 seed: int = 0, event_sink=None, key_lifetime_ms=None,
                 rl_lifetime_ms: int = DEFAULT_RL_LIFETIME_MS):
        self.bundle = bundle
        self.host = host
        self.engine = engine
        self.cn = bundle.identity.common_name
        self.policy = pol.policy_from_doc(bundle.policy_doc)
        self.rls = sess_mod.RlStore(bundle.cert_rl, bundle.cred_rl)
        self.runtime = NodeRuntime(engine)
        self.key_lifetime_ms = key_lifetime_ms or bundle.key_lifetime_ms
        self.rl_lifetime_ms = rl_lifetime_ms
        self.sessions: dict[str, sess_mod.Session] = {}
        self._by_udp_peer: dict[tuple[str, int], sess_mod.Session] = {}
        self._event_sink = event_sink or (lambda cn, name, t, fields: None)
        net = getattr(host, "network", None)
        self.sv = sess_mod.Services(
            now_ms=host.now_ms,
            work=self.runtime.submit,
            schedule=engine.after_ms,
            rng=random.Random(crypto.sub_seed(seed, f"node:{self.cn}")),
            event=self._event,
            report_outcome=net.report_outcome if net is not None else None,
        )
        self._next_client_port = bundle.client_port_range[0]
        self._timers: list[_Repeat] = []
        self._udp_sock = None
        self.started = False
        self.rx_jobs = 0
        self.rx_busy_us = 0

    # lifecycle

    def start(self) -> None:
        self.host.listen_stream(self.bundle.server_port, self._accept)
        self._udp_sock = self.host.bind_udp(self.bundle.udp_port, self._on_server_udp)
        self._timers.append(_Repeat(self.engine, RENEWAL_CHECK_INTERVAL_MS,
                                    self._renewal_tick))
        self._role_start()
        self.started = True

    def stop(self) -> None:
        for timer in self._timers:
            timer.cancel()
        self._timers.clear()
        self.started = False

    def _role_start(self) -> None:
        pass

    def _event(self, name: str, **fields) -> None:
        self._event_sink(self.cn, name, self.engine.now_ms(), fields)

    # datagram entry

    def _on_server_udp(self, data: bytes, src, meta) -> None:
        self._receive(self._by_udp_peer.get(src), data, meta)

    def _receive(self, sess, data: bytes, meta) -> None:
        if sess is None:
            self._event("MsgDropped", reason="NoSession", bytes=len(data))
            self.sv.report_outcome(meta, False, "NoSession")
            return
        cost = PROC_COST_MS[self.role]
        self.rx_jobs += 1
        self.rx_busy_us += int(cost * 1000)
        self.runtime.submit(cost, lambda: sess.handle_datagram(data, meta))

    # establishment

    def execute_order(self, order: sess_mod.ConnectionOrder) -> None:
        """Run the client side of an order addressed to this node."""
        if order.client_cn != self.cn:
            raise ValueError(f"order for {order.client_cn} executed on {self.cn}")

        # datagrams can land between the server finishing and this side
        # wiring its session; hold them instead of crashing the socket
        early: list[tuple[bytes, object, object]] = []

        def udp_bind():
            sock = self.host.bind_udp(self._alloc_client_port(),
                                      lambda d, s, m: early.append((d, s, m)))
            return sock, sock.port

        holder: dict[str, sess_mod.Establisher] = {}

        def done(result):
            self._establish_done(order, holder["est"], result, early)

        est = sess_mod.Establisher(order, self.bundle, self.rls, self.host,
                                   self.sv, udp_bind, on_done=done)
        holder["est"] = est
        est.start()

    def _alloc_client_port(self) -> int:
        lo, hi = self.bundle.client_port_range
        port = self._next_client_port
        self._next_client_port = lo + (port - lo + 1) % (hi - lo + 1)
        return port

    def _establish_done(self, order, est, result, early) -> None:
        if isinstance(result, sess_mod.Failure):
            self._event("EstFailed", peer=order.server_cn, step=result.step,
                        reason=result.reason)
            if est.udp_sock is not None and not est.udp_sock.closed:
                est.udp_sock.close()
            self.on_establish_failed(order, result)
            return
        sess = self._make_session(result, est.udp_sock)
        est.udp_sock.handler = lambda d, s, m: self._receive(sess, d, m)
        for d, _s, m in early:
            self._receive(sess, d, m)
        early.clear()

    def _accept(self, conn) -> None:
        sess_mod.Acceptor(conn, conn.peer[0], self.bundle, self.rls, self.host,
                          self.sv, on_done=self._accept_done)

    def _accept_done(self, result) -> None:
        if isinstance(result, sess_mod.Failure):
            self._event("EstFailed", step=result.step, reason=result.reason)
            return
        self._make_session(result, self._udp_sock)

    def _make_session(self, state: sess_mod.SessionState, sock) -> sess_mod.Session:
        sess = sess_mod.Session(
            state, self.bundle, self.policy, self.rls, sock, self.sv,
            key_lifetime_ms=self.key_lifetime_ms,
            dispatch=self._dispatch,
            on_rl_payload=self._on_rl_payload,
            on_closed=self._session_closed,
        )
        self.sessions[state.peer.common_name] = sess
        if not state.is_client:
            self._by_udp_peer[state.udp_peer] = sess
        self._event("SessionUp", peer=state.peer.common_name,
                    client=state.is_client)
        self.on_session_up(sess)
        return sess

    def _session_closed(self, sess, reason: str) -> None:
        peer = sess.peer_cn
        if self.sessions.get(peer) is sess:
            del self.sessions[peer]
        st = sess.state
        if self._by_udp_peer.get(st.udp_peer) is sess:
            del self._by_udp_peer[st.udp_peer]
        if st.is_client and sess.sock is not self._udp_sock:
            sess.sock.close()
        self.on_session_down(sess, reason)

    def _renewal_tick(self) -> None:
        for sess in list(self.sessions.values()):
            if sess.state.is_client:
                sess.maybe_start_renewal()

    # inbound dispatch

    def _dispatch(self, sess, msg: wire.Nc2sMessage, meta) -> None:
        t = msg.msg_type
        if t == wire.DATA:
            self.on_data(sess, msg.payload)
        elif t in (wire.ORDER_CT2, wire.ORDER_GCS, wire.ORDER_UXV):
            self._on_order(sess, msg.payload)
        elif t in (wire.CRED_UPDATE_CT2, wire.CRED_UPDATE_GCS, wire.CRED_UPDATE_UXV):
            self._on_cred_update(sess, msg.payload)
        elif t == wire.MAP_REPORT:
            self.on_map_report(sess, msg.payload)
        elif t == wire.MAP_AGGREGATE:
            self.on_map_aggregate(sess, msg.payload)
        else:
            self.on_other(sess, msg)

    def _on_order(self, sess, payload: bytes) -> None:
        try:
            order = sess_mod.ConnectionOrder.from_bytes(payload)
        except ValueError:
            self._event("MsgDropped", reason="MalformedOrder", peer=sess.peer_cn)
            return
        if order.client_cn == self.cn:
            self.execute_order(order)
        else:
            self._forward_order(order)

    def _forward_order(self, order: sess_mod.ConnectionOrder) -> bool:
        next_cn = order.route[0] if order.route else order.client_cn
        env = order.next_hop() if order.route else order
        return self._send_envelope(next_cn, env.to_bytes(),
                                   _ORDER_TYPE_BY_ROLE, "order")

    def _on_cred_update(self, sess, payload: bytes) -> None:
        try:
            update = sess_mod.CredentialUpdate.from_bytes(payload)
        except ValueError:
            self._event("MsgDropped", reason="MalformedUpdate", peer=sess.peer_cn)
            return
        if update.target_cn == self.cn:
            self.runtime.submit(COST_CRED_UPDATE_MS,
                                lambda: self._apply_cred_update(update.credential))
        else:
            self._forward_update(update)

    def _forward_update(self, update: sess_mod.CredentialUpdate) -> bool:
        next_cn = update.route[0] if update.route else update.target_cn
        env = update.next_hop() if update.route else update
        return self._send_envelope(next_cn, env.to_bytes(),
                                   _CRED_UPDATE_TYPE_BY_ROLE, "credupdate")

    def _send_envelope(self, next_cn: str, payload: bytes,
                       type_table: dict, kind: str) -> bool:
        sess = self.sessions.get(next_cn)
        if sess is None or sess.state.phase is not sess_mod.Phase.ESTABLISHED:
            self._event("RouteDead", next=next_cn, kind=kind)
            return False
        msg_type = type_table.get(sess.state.peer.role)
        if msg_type is None:
            self._event("RouteDead", next=next_cn, kind=kind)
            return False
        return sess.send_message(msg_type, payload)

    def _apply_cred_update(self, cred: artifacts.Credential) -> None:
        for sess in self.sessions.values():
            old = sess.state.credential
            if (old.pk_client, old.pk_server) == (cred.pk_client, cred.pk_server):
                sess.apply_credential_update(cred)
                return
        self._event("CredUpdateOrphan")

    # revocation lists

    def _on_rl_payload(self, sess, msg_type: int, payload: bytes) -> None:
        self.runtime.submit(COST_RL_APPLY_MS,
                            lambda: self._apply_rl(sess, msg_type, payload))

    def _apply_rl(self, source, msg_type: int, payload: bytes) -> None:
        if msg_type == wire.CERTRL_UPDATE:
            self._apply_certrl(source, payload)
        else:
            self._apply_credrl(source, payload)

    def _apply_certrl(self, source, payload: bytes) -> None:
        try:
            rl = artifacts.CertRl.from_bytes(payload)
        except ValueError:
            self._event("RlIgnored", kind="cert", reason="Malformed")
            return
        if not rl.signature_valid_under(self.bundle.ca_certificate.public_key()):
            self._event("RlIgnored", kind="cert", reason="BadSignature")
            return
        if not rl.valid_at(self.host.now_ms()):
            self._event("RlIgnored", kind="cert", reason="OutsideValidity")
            return
        if rl.t_iss <= self.rls.cert_rl.t_iss:
            self._event("RlIgnored", kind="cert", reason="Stale")
            return
        self.rls.cert_rl = rl
        self._event("RlApplied", kind="cert", t_iss=rl.t_iss,
                    entries=len(rl.serials))
        self._rebroadcast(wire.CERTRL_UPDATE, payload, source)
        for sess in list(self.sessions.values()):
            if sess.state.peer_cert.serial in rl.serials:
                sess.close("Revoked")

    def _apply_credrl(self, source, payload: bytes) -> None:
        try:
            rl = artifacts.CredRl.from_bytes(payload)
        except ValueError:
            self._event("RlIgnored", kind="cred", reason="Malformed")
            return
        tc1_pub = crypto.point_from_bytes(self.bundle.tc1_public_key)
        if not rl.signature_valid_under(tc1_pub):
            self._event("RlIgnored", kind="cred", reason="BadSignature")
            return
        if not rl.valid_at(self.host.now_ms()):
            self._event("RlIgnored", kind="cred", reason="OutsideValidity")
            return
        if rl.t_iss <= self.rls.cred_rl.t_iss:
            self._event("RlIgnored", kind="cred", reason="Stale")
            return
        self.rls.cred_rl = rl
        self._event("RlApplied", kind="cred", t_iss=rl.t_iss,
                    entries=len(rl.hash_list))
        self._rebroadcast(wire.CREDRL_UPDATE, payload, source)
        revoked = rl.hash_set
        for sess in list(self.sessions.values()):
            if artifacts.credential_hash(sess.state.credential) in revoked:
                sess.close("Revoked")

    def _rebroadcast(self, msg_type: int, payload: bytes, exclude) -> None:
        for sess in list(self.sessions.values()):
            if sess is exclude or sess.state.phase is not sess_mod.Phase.ESTABLISHED:
                continue
            if sess.send_message(msg_type, payload):
                self._event("RlSent", peer=sess.peer_cn, msg_type=msg_type)

    # role hooks

    def on_data(self, sess, payload: bytes) -> None:
        pass

    def on_map_report(self, sess, payload: bytes) -> None:
        pass

    def on_map_aggregate(self, sess, payload: bytes) -> None:
        pass

    def on_other(self, sess, msg: wire.Nc2sMessage) -> None:
        pass

    def on_session_up(self, sess) -> None:
        pass

    def on_session_down(self, sess, reason: str) -> None:
        pass

    def on_establish_failed(self, order, failure) -> None:
        pass


# --- CT1 --------------------------------------------------------------------


@dataclass
class IssuedCredential:
    client_cn: str
    server_cn: str
    credential: artifacts.Credential


class Ct1Node(Node):
    """Commander authority: signs credentials, issues RLs, owns the map."""

    role = Role.CT1

    def __init__(self, bundle, host, engine, *, ca_signer=None, **kw):
        super().__init__(bundle, host, engine, **kw)
        if bundle.master is None:
            raise ValueError("commander bundle lacks the master node list")
        self.directory = {r.identity.common_name: r for r in bundle.master}
        self.ca_signer = ca_signer
        self.issued: list[IssuedCredential] = []
        self.revoked_creds: list[tuple[bytes, int]] = []   # (hash, cred t_exp)
        self.revoked_serials: list[tuple[int, int]] = []   # (serial, not_after)
        self.network_map: dict[str, MapEntry] = {}
        self._cid = 0

    def _role_start(self) -> None:
        self._timers.append(_Repeat(self.engine, ARTIFACT_CHECK_INTERVAL_MS,
                                    self._artifact_tick))

    # command surface (mirrored by the control API)

    def ct1_command(self, cmd: dict) -> dict:
        """Validate and dispatch one commander action.

        Returns ``{"ok", "cid", "error"}`` immediately; the protocol actions
        run asynchronously on this node's CPU and conclude with a CmdDone
        event carrying the same correlation id.
        """
        kind = cmd.get("cmd")
        handlers = {
            "NewConnection": self._cmd_new_connection,
            "RevokeCredential": self._cmd_revoke_credential,
            "RevokeCertificate": self._cmd_revoke_certificate,
            "ChangeCapacity": self._cmd_change_capacity,
            "RenewArtifacts": self._cmd_renew_artifacts,
        }
        handler = handlers.get(kind)
        if handler is None:
            return {"ok": False, "cid": None, "error": f"unknown command {kind!r}"}
        self._cid += 1
        cid = self._cid
        try:
            handler(cid, cmd)
        except _CommandError as exc:
            return {"ok": False, "cid": cid, "error": str(exc)}
        return {"ok": True, "cid": cid, "error": None}

    def _record(self, cn: str) -> artifacts.NodeRecord:
        rec = self.directory.get(cn)
        if rec is None:
            raise _CommandError(f"unknown node {cn!r}")
        return rec

    def _route_to(self, target_cn: str) -> tuple[str, ...] | None:
        """Intermediate hops toward ``target_cn`` over the ordered topology.

        Empty tuple for a direct peer, None when no path is known. The graph
        is what this commander itself has wired: its live sessions plus
        every connection it has ordered.
        """
        if target_cn in self.sessions:
            return ()
        adj: dict[str, set[str]] = {self.cn: set(self.sessions)}
        for rec in self.issued:
            adj.setdefault(rec.client_cn, set()).add(rec.server_cn)
            adj.setdefault(rec.server_cn, set()).add(rec.client_cn)
        prev: dict[str, str | None] = {self.cn: None}
        queue = deque([self.cn])
        while queue:
            cur = queue.popleft()
            if cur == target_cn:
                path = []
                node: str | None = cur
                while node is not None:
                    path.append(node)
                    node = prev[node]
                path.reverse()
                return tuple(path[1:-1])
            for nxt in sorted(adj.get(cur, ())):
                if nxt not in prev:
                    prev[nxt] = cur
                    queue.append(nxt)
        return None

    def _cmd_new_connection(self, cid: int, cmd: dict) -> None:
        client = self._record(cmd.get("client", ""))
        server = self._record(cmd.get("server", ""))
        try:
            link_type = artifacts.link_type_for(client.identity.role,
                                                server.identity.role)
        except ValueError as exc:
            raise _CommandError(str(exc))
        cap = cmd.get("capacity") or ("C2" if link_type != artifacts.LINK_GCS_UXV
                                      else "CTRL")
        lifetime = cmd.get("lifetime_ms", DEFAULT_CRED_LIFETIME_MS)
        route = tuple(cmd.get("route", ()))
        capacity_bps = cmd.get("capacity_bps", 0)

        def run():
            now = self.host.now_ms()
            cred = artifacts.sign_credential(
                self.bundle.own_private_key, link_type,
                client.identity.public_key, server.identity.public_key,
                cap, now, now + lifetime, policy=self.policy)
            self.issued.append(IssuedCredential(
                client.identity.common_name, server.identity.common_name, cred))
            order = sess_mod.ConnectionOrder(
                client_cn=client.identity.common_name,
                server_cn=server.identity.common_name,
                server_ip=server.identity.ip_address,
                tls_port=server.tls_port,
                udp_port=server.udp_port,
                credential=cred,
                route=route,
                capacity_bps=capacity_bps,
            )
            if order.client_cn == self.cn:
                self.execute_order(order)
            else:
                if not order.route:
                    hops = self._route_to(order.client_cn)
                    if hops:
                        order = replace(order, route=hops)
                self._forward_order(order)
            self._event("CmdDone", cid=cid, cmd="NewConnection")

        self.runtime.submit(COST_SIGN_MS, run)

    def _find_issued(self, client_cn: str, server_cn: str) -> IssuedCredential:
        for rec in reversed(self.issued):
            if (rec.client_cn, rec.server_cn) == (client_cn, server_cn):
                return rec
        raise _CommandError(f"no credential on record for "
                            f"{client_cn!r}->{server_cn!r}")

    def _cmd_revoke_credential(self, cid: int, cmd: dict) -> None:
        rec = self._find_issued(cmd.get("client", ""), cmd.get("server", ""))

        def run():
            now = self.host.now_ms()
            self.revoked_creds.append(
                (artifacts.credential_hash(rec.credential), rec.credential.t_exp))
            rl = artifacts.build_credrl(
                self.bundle.own_private_key,
                [h for h, t_exp in self.revoked_creds if t_exp > now],
                (now, now + self.rl_lifetime_ms))
            payload = rl.to_bytes()

            def adopt():
                self._apply_credrl(None, payload)
                self._event("CmdDone", cid=cid, cmd="RevokeCredential")

            self.runtime.submit(COST_RL_APPLY_MS, adopt)

        self.runtime.submit(COST_SIGN_MS, run)

    def _cmd_revoke_certificate(self, cid: int, cmd: dict) -> None:
        rec = self._record(cmd.get("cn", ""))
        if self.ca_signer is None:
            raise _CommandError("certificate authority unreachable")
        cert = artifacts.Certificate.from_pem(rec.cert_pem.encode())

        def run():
            now = self.host.now_ms()
            self.revoked_serials.append((rec.serial, cert.not_after_ms))
            rl = self.ca_signer(
                [s for s, t_end in self.revoked_serials if t_end > now],
                (now, now + self.rl_lifetime_ms))
            payload = rl.to_bytes()
            self._apply_certrl(None, payload)
            self._event("CmdDone", cid=cid, cmd="RevokeCertificate")

        self.runtime.submit(COST_RL_APPLY_MS, run)

    def _cmd_change_capacity(self, cid: int, cmd: dict) -> None:
        uxv = cmd.get("uxv", "")
        predecessor = self._find_issued(cmd.get("predecessor", ""), uxv)
        successor = self._find_issued(cmd.get("successor", ""), uxv)
        monitor_cap = cmd.get("monitor_cap", "MON")
        control_cap = cmd.get("control_cap", "CTRL")

        # the predecessor's downgrade is signed and sent first so control is
        # released before it is granted elsewhere
        def downgrade():
            self._reissue_capacity(predecessor, monitor_cap)

        def upgrade():
            self._reissue_capacity(successor, control_cap)
            self._event("CmdDone", cid=cid, cmd="ChangeCapacity")

        self.runtime.submit(COST_SIGN_MS, downgrade)
        self.runtime.submit(COST_SIGN_MS, upgrade)

    def _reissue_capacity(self, rec: IssuedCredential, cap: str) -> None:
        old = rec.credential
        now = self.host.now_ms()
        cred = artifacts.sign_credential(
            self.bundle.own_private_key, old.link_type, old.pk_client,
            old.pk_server, cap, now, old.t_exp, policy=self.policy)
        rec.credential = cred
        self._deliver_update(rec.client_cn, cred)
        self._deliver_update(rec.server_cn, cred)

    def _deliver_update(self, target_cn: str, cred: artifacts.Credential) -> None:
        if target_cn == self.cn:
            self.runtime.submit(COST_CRED_UPDATE_MS,
                                lambda: self._apply_cred_update(cred))
            return
        route = self._route_to(target_cn)
        if route is None:
            self._event("RouteDead", next=target_cn, kind="credupdate")
            return
        update = sess_mod.CredentialUpdate(target_cn, cred, route)
        if self._forward_update(update):
            self._event("CredUpdateSent", target=target_cn, cap=cred.cap)

    def _cmd_renew_artifacts(self, cid: int, cmd: dict) -> None:
        def run():
            actions = self._pending_renewals()
            self._execute_renewals(actions)
            self._event("CmdDone", cid=cid, cmd="RenewArtifacts",
                        actions=len(actions))

        self.runtime.submit(COST_RL_APPLY_MS, run)

    def _pending_renewals(self) -> list[tuple]:
        now = self.host.now_ms()
        certs = [(cn, artifacts.Certificate.from_pem(rec.cert_pem.encode()))
                 for cn, rec in sorted(self.directory.items())]
        creds = [(i, rec.credential) for i, rec in enumerate(self.issued)]
        return renewal_actions(creds, certs, self.rls.cert_rl,
                               self.rls.cred_rl, now)

    def _artifact_tick(self) -> None:
        actions = self._pending_renewals()
        if actions:
            self._execute_renewals(actions)

    def _execute_renewals(self, actions: list[tuple]) -> None:
        now = self.host.now_ms()
        for kind, tag in actions:
            if kind == "credential":
                rec = self.issued[tag]
                span = rec.credential.t_exp - rec.credential.t_iss
                self.runtime.submit(
                    COST_SIGN_MS,
                    lambda r=rec, s=span: self._reissue_lifetime(r, s))
            elif kind == "certificate":
                self._event("CertRenewalRequested", cn=tag)
            elif kind == "credrl":
                self.runtime.submit(COST_SIGN_MS, lambda: self._reissue_credrl())
            elif kind == "certrl" and self.ca_signer is not None:
                rl = self.ca_signer(
                    [s for s, t_end in self.revoked_serials if t_end > now],
                    (now, now + self.rl_lifetime_ms))
                payload = rl.to_bytes()
                self.runtime.submit(COST_RL_APPLY_MS,
                                    lambda p=payload: self._apply_certrl(None, p))

    def _reissue_lifetime(self, rec: IssuedCredential, span: int) -> None:
        old = rec.credential
        now = self.host.now_ms()
        cred = artifacts.sign_credential(
            self.bundle.own_private_key, old.link_type, old.pk_client,
            old.pk_server, old.cap, now, now + span, policy=self.policy)
        rec.credential = cred
        self._deliver_update(rec.client_cn, cred)
        self._deliver_update(rec.server_cn, cred)

    def _reissue_credrl(self) -> None:
        now = self.host.now_ms()
        rl = artifacts.build_credrl(
            self.bundle.own_private_key,
            [h for h, t_exp in self.revoked_creds if t_exp > now],
            (now, now + self.rl_lifetime_ms))
        payload = rl.to_bytes()
        self.runtime.submit(COST_RL_APPLY_MS,
                            lambda: self._apply_credrl(None, payload))

    # map view

    def on_map_report(self, sess, payload: bytes) -> None:
        try:
            reporter, entries = decode_map_report(payload)
        except ValueError:
            self._event("MsgDropped", reason="MalformedReport", peer=sess.peer_cn)
            return
        self._merge_map([reporter],
                        [MapEntry(cn, reporter, seen) for cn, seen in entries])

    def on_map_aggregate(self, sess, payload: bytes) -> None:
        try:
            reporters, entries = decode_map_aggregate(payload)
        except ValueError:
            self._event("MsgDropped", reason="MalformedAggregate", peer=sess.peer_cn)
            return
        self._merge_map(reporters, entries)

    def _merge_map(self, covered_reporters: Sequence[str],
                   entries: Sequence[MapEntry]) -> None:
        covered = set(covered_reporters)
        kept = {u: e for u, e in self.network_map.items()
                if e.gcs_cn not in covered}
        for entry in entries:
            cur = kept.get(entry.uxv_cn)
            if cur is None or entry.last_seen_ms >= cur.last_seen_ms:
                kept[entry.uxv_cn] = entry
        if kept != self.network_map:
            self.network_map = kept
            self._event("MapUpdated", entries=len(kept))


class _CommandError(Exception):
    pass


# --- CT2 --------------------------------------------------------------------


class Ct2Node(Node):
    """Relay commander: forwards routed envelopes, aggregates map reports."""

    role = Role.CT2

    def __init__(self, bundle, host, engine, **kw):
        super().__init__(bundle, host, engine, **kw)
        self._reports: dict[str, list[tuple[str, int]]] = {}
        self.network_map: dict[str, MapEntry] = {}

    def _role_start(self) -> None:
        self._timers.append(_Repeat(self.engine, AGGREGATE_INTERVAL_MS,
                                    self._aggregate_tick))

    def on_map_report(self, sess, payload: bytes) -> None:
        try:
            reporter, entries = decode_map_report(payload)
        except ValueError:
            self._event("MsgDropped", reason="MalformedReport", peer=sess.peer_cn)
            return
        self._reports[reporter] = entries

    def on_session_down(self, sess, reason: str) -> None:
        self._reports.pop(sess.peer_cn, None)

    def _aggregate_tick(self) -> None:
        reporters, entries = map_aggregate(sorted(self._reports.items()))
        self.network_map = {e.uxv_cn: e for e in entries}
        if not reporters:
            return
        payload = encode_map_aggregate(reporters, entries)
        for sess in self.sessions.values():
            if (sess.state.peer.role is Role.CT1
                    and sess.state.phase is sess_mod.Phase.ESTABLISHED):
                sess.send_message(wire.MAP_AGGREGATE, payload)


# --- GCS --------------------------------------------------------------------


class GcsNode(Node):
    """Operator proxy: telemetry passthrough, narrowband filter, reports."""

    role = Role.GCS

    def __init__(self, bundle, host, engine, *,
                 filter_interval_ms: int = FILTER_INTERVAL_MS, **kw):
        super().__init__(bundle, host, engine, **kw)
        self.filter_interval_ms = filter_interval_ms
        self._filter_state: dict[str, dict] = {}
        self.operator_frames: list[bytes] = []
        self.on_operator_frame: Callable[[bytes], None] | None = None

    def _role_start(self) -> None:
        self._timers.append(_Repeat(self.engine, REPORT_INTERVAL_MS,
                                    self._report_tick))

    def _commander_sessions(self):
        return [s for s in self.sessions.values()
                if s.state.peer.role in (Role.CT1, Role.CT2)
                and s.state.phase is sess_mod.Phase.ESTABLISHED]

    def _uxv_sessions(self):
        return [s for s in self.sessions.values()
                if s.state.peer.role is Role.UXV
                and s.state.phase is sess_mod.Phase.ESTABLISHED]

    def on_data(self, sess, payload: bytes) -> None:
        if sess.state.peer.role is Role.UXV:
            self.operator_frames.append(payload)
            if self.on_operator_frame is not None:
                self.on_operator_frame(payload)
            now = self.host.now_ms()
            for up in self._commander_sessions():
                state = self._filter_state.setdefault(up.peer_cn, {})
                if radio_filter(payload, now, state, self.filter_interval_ms,
                                narrowband=up.state.narrowband):
                    up.send_message(wire.DATA, payload)
        else:
            # commander-sourced frame: hand to every vehicle link; per-link
            # authorization decides whether this proxy may steer
            for down in self._uxv_sessions():
                down.send_message(wire.DATA, payload)

    def operator_send(self, frame: bytes, uxv_cn: str | None = None) -> bool:
        """Wrap one operator-side frame for the vehicle link."""
        if len(frame) + wire.HEADER_LEN + wire.TRAILER_LEN > OPERATOR_MTU:
            self._event("MsgDropped", reason="MtuExceeded", local=True,
                        bytes=len(frame))
            return False
        if uxv_cn is not None:
            sess = self.sessions.get(uxv_cn)
            targets = [sess] if sess in self._uxv_sessions() else []
        else:
            targets = self._uxv_sessions()
        if not targets:
            self._event("MsgDropped", reason="NoSession", local=True)
            return False
        ok = False
        for sess in targets:
            ok = sess.send_message(wire.DATA, frame) or ok
        return ok

    def on_session_down(self, sess, reason: str) -> None:
        self._filter_state.pop(sess.peer_cn, None)

    def _report_tick(self) -> None:
        entries = [(s.peer_cn, s.state.last_seen_ms) for s in self._uxv_sessions()]
        entries.sort()
        payload = encode_map_report(self.cn, entries)
        for up in self._commander_sessions():
            up.send_message(wire.MAP_REPORT, payload)


# --- UxV --------------------------------------------------------------------


class UxvNode(Node):
    """Vehicle proxy: bridges the autopilot stream onto secured sessions."""

    role = Role.UXV

    def __init__(self, bundle, host, engine, *, autopilot_config=None, **kw):
        super().__init__(bundle, host, engine, **kw)
        self.autopilot = StubAutopilot(engine, self._telemetry,
                                       **(autopilot_config or {}))
        self.received_frames: list[bytes] = []

    def _role_start(self) -> None:
        self.autopilot.start()

    def stop(self) -> None:
        self.autopilot.stop()
        super().stop()

    def _telemetry(self, frame: bytes) -> None:
        for sess in self.sessions.values():
            if (sess.state.peer.role is Role.GCS
                    and sess.state.phase is sess_mod.Phase.ESTABLISHED):
                sess.send_message(wire.DATA, frame)

    def on_data(self, sess, payload: bytes) -> None:
        self.received_frames.append(payload)
        self.autopilot.handle_command(payload)


NODE_CLASSES: dict[Role, type[Node]] = {
    Role.CT1: Ct1Node,
    Role.CT2: Ct2Node,
    Role.GCS: GcsNode,
    Role.UXV: UxvNode,
}


def make_node(bundle: artifacts.ConfigBundle, host, engine, **kw) -> Node:
    """Construct the right role runtime for a bundle."""
    cls = NODE_CLASSES.get(bundle.identity.role)
    if cls is None:
        raise ValueError(f"no runtime for role {bundle.identity.role}")
    return cls(bundle, host, engine, **kw)
