"""Deterministic virtual-time network substrate.

A single-threaded discrete-event engine drives hosts joined by point-to-point
links. Each link direction models serialization at the configured line rate, a
byte-bounded tail-drop FIFO, sampled jitter and loss, and an MTU. Everything
random comes from per-path generators seeded off the scenario seed, so a run
is a pure function of (scenario, seed) and golden-trace tests are possible.

Time is kept in integer microseconds. Host clocks read the engine and add a
configurable per-host skew, which is what the wire timestamps see.

The module also provides a stop-and-wait reliable byte stream over the
datagram substrate (used for control-channel traffic) and an adversary tap
that can observe, drop, delay, reorder, rewrite, replay, or inject datagrams
on a link.
"""

from __future__ import annotations

import heapq
import itertools
import random
import struct
import time as _time
from dataclasses import dataclass, field
from typing import Callable

from . import crypto

Address = tuple[str, int]


# ---------------------------------------------------------------------------
# event engine


class Timer:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn: Callable[[], None]):
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventEngine:
    """Min-heap of (time, seq) with integer-microsecond resolution."""

    def __init__(self, start_ms: int = 0):
        self._now_us = start_ms * 1000
        self._heap: list[tuple[int, int, Timer]] = []
        self._seq = itertools.count()

    @property
    def now_us(self) -> int:
        return self._now_us

    def now_ms(self) -> int:
        return self._now_us // 1000

    def at(self, at_us: int, fn: Callable[[], None]) -> Timer:
        if at_us < self._now_us:
            at_us = self._now_us
        timer = Timer(fn)
        heapq.heappush(self._heap, (at_us, next(self._seq), timer))
        return timer

    def after_us(self, delay_us: int, fn: Callable[[], None]) -> Timer:
        return self.at(self._now_us + max(0, delay_us), fn)

    def after_ms(self, delay_ms: float, fn: Callable[[], None]) -> Timer:
        return self.after_us(int(round(delay_ms * 1000)), fn)

    def step(self) -> bool:
        while self._heap:
            at_us, _, timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self._now_us = at_us
            timer.fn()
            return True
        return False

    def run_until(self, until_us: int, max_events: int = 10_000_000) -> None:
        count = 0
        while self._heap:
            at_us, _, timer = self._heap[0]
            if at_us > until_us:
                break
            heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self._now_us = at_us
            timer.fn()
            count += 1
            if count > max_events:
                raise RuntimeError("event budget exceeded; runaway schedule?")
        if until_us > self._now_us:
            self._now_us = until_us

    def run_for_ms(self, ms: float) -> None:
        self.run_until(self._now_us + int(round(ms * 1000)))

    def run_until_idle(self, max_events: int = 10_000_000) -> None:
        count = 0
        while self.step():
            count += 1
            if count > max_events:
                raise RuntimeError("event budget exceeded; runaway schedule?")

    def run_realtime(
        self,
        until_us: int | None = None,
        speed: float = 1.0,
        should_stop: Callable[[], bool] | None = None,
        idle_hook: Callable[[float], None] | None = None,
    ) -> None:
        """Pace the virtual clock against the wall clock (demo mode only).

        Not deterministic relative to external I/O; golden-trace tests never
        use it. idle_hook(seconds) runs instead of sleeping so a caller can
        poll real sockets while waiting.
        """
        wall_start = _time.monotonic()
        virt_start = self._now_us
        while self._heap:
            if should_stop is not None and should_stop():
                return
            at_us, _, timer = self._heap[0]
            if until_us is not None and at_us > until_us:
                break
            ahead = (at_us - virt_start) / 1e6 / speed - (_time.monotonic() - wall_start)
            if ahead > 0:
                if idle_hook is not None:
                    idle_hook(min(ahead, 0.05))
                else:
                    _time.sleep(min(ahead, 0.25))
                continue
            heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self._now_us = at_us
            timer.fn()
        if until_us is not None and until_us > self._now_us:
            self._now_us = until_us


# ---------------------------------------------------------------------------
# link profiles


@dataclass(frozen=True)
class JitterSpec:
    """Truncated normal: gauss(0, sigma) clamped to [low, high], in ms."""

    sigma: float = 0.0
    low: float = 0.0
    high: float = 0.0

    def sample(self, rng: random.Random) -> float:
        if self.sigma == 0.0:
            return self.low
        return min(self.high, max(self.low, rng.gauss(0.0, self.sigma)))


@dataclass(frozen=True)
class LinkProfile:
    name: str
    one_way_delay_ms: float
    jitter: JitterSpec
    capacity_bps: float
    loss_rate: float
    mtu: int
    queue_bytes: int

    def __post_init__(self):
        if self.capacity_bps <= 0:
            raise ValueError("capacity_bps must be positive")
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError("loss_rate must be in [0, 1)")
        if self.mtu <= 0 or self.queue_bytes <= 0:
            raise ValueError("mtu and queue_bytes must be positive")


# Wi-Fi regime: ping RTT about 5.5 ms, sub-millisecond jitter, effectively
# unconstrained capacity for C2-sized traffic.
WIFI = LinkProfile("WIFI", 2.75, JitterSpec(0.4, 0.0, 1.2), 25_000_000.0, 0.005, 1500, 65_536)

# Narrowband radio regime: 5 kb/s line rate, RTT for small probes lands in
# the 839-968 ms band once both serializations and jitter are counted.
RADIO = LinkProfile("RADIO", 450.0, JitterSpec(12.0, -34.0, 20.0), 5_000.0, 0.01, 1500, 4_096)

# Ideal channel for compute-floor and unit tests.
LOOP = LinkProfile("LOOP", 0.0, JitterSpec(), 1e12, 0.0, 65_600, 1 << 30)


def builtin_profiles() -> dict[str, LinkProfile]:
    return {"WIFI": WIFI, "RADIO": RADIO}


def profile_by_name(name: str) -> LinkProfile:
    table = {"WIFI": WIFI, "RADIO": RADIO, "LOOP": LOOP}
    try:
        return table[name.upper()]
    except KeyError:
        raise ValueError(f"unknown link profile {name!r}") from None


# ---------------------------------------------------------------------------
# hosts and links


class UdpSocket:
    def __init__(self, host: "Host", port: int, handler):
        self.host = host
        self.port = port
        self.handler = handler
        self.closed = False

    def sendto(self, data: bytes, dst: Address, meta: dict | None = None) -> None:
        if not self.closed:
            self.host.network.send_datagram(data, (self.host.ip, self.port), dst, meta)

    def close(self) -> None:
        self.closed = True
        self.host._udp.pop(self.port, None)


class Host:
    def __init__(self, network: "VirtualNetwork", name: str, ip: str):
        self.network = network
        self.name = name
        self.ip = ip
        self.clock_skew_ms = 0
        self._udp: dict[int, UdpSocket] = {}
        self._ephemeral = itertools.count(61000)
        self._stream_listeners: dict[int, "StreamListener"] = {}
        self._streams: dict[tuple[Address, int], "StreamConn"] = {}

    def now_ms(self) -> int:
        return self.network.engine.now_ms() + self.clock_skew_ms

    def bind_udp(self, port: int, handler) -> UdpSocket:
        if port == 0:
            port = next(self._ephemeral)
        if port in self._udp:
            raise ValueError(f"{self.name}: UDP port {port} already bound")
        sock = UdpSocket(self, port, handler)
        self._udp[port] = sock
        return sock

    def _deliver_udp(self, data: bytes, src: Address, dst_port: int, meta: dict | None) -> None:
        sock = self._udp.get(dst_port)
        if sock is None:
            self.network.record("drop", dst=(self.ip, dst_port), src=src,
                                size=len(data), reason="NoListener")
            return
        self.network.record("rx", dst=(self.ip, dst_port), src=src, size=len(data))
        sock.handler(data, src, meta)

    # stream API (see StreamConn below)

    def listen_stream(self, port: int, on_accept) -> "StreamListener":
        listener = StreamListener(self, port, on_accept)
        self._stream_listeners[port] = listener
        listener.sock = self.bind_udp(port, listener._on_datagram)
        return listener

    def connect_stream(self, dst: Address, on_open, on_data, on_close) -> "StreamConn":
        conn_id = self.network.rng.getrandbits(32)
        sock = self.bind_udp(0, None)
        conn = StreamConn(self, sock, dst, conn_id, initiator=True,
                          on_open=on_open, on_data=on_data, on_close=on_close)
        sock.handler = conn._on_datagram
        self._streams[(dst, conn_id)] = conn
        conn._start_connect()
        return conn


class LinkPath:
    """One direction of a link: serializer + queue + delay/jitter/loss."""

    def __init__(self, network: "VirtualNetwork", profile: LinkProfile,
                 dst_ip: str, label: str, rng: random.Random):
        self.network = network
        self.profile = profile
        self.dst_ip = dst_ip
        self.label = label
        self.rng = rng
        self.busy_until_us = 0
        self.queued_bytes = 0
        self.last_delivery_us = 0
        self.adversary: "Adversary | None" = None

    def send(self, data: bytes, src: Address, dst: Address, meta: dict | None) -> None:
        if len(data) > self.profile.mtu:
            self._drop(data, src, dst, meta, "MtuExceeded")
            return
        if self.adversary is not None:
            for out_data, out_meta, extra_us in self.adversary.tap(data, src, dst, meta):
                self._enqueue(out_data, src, dst, out_meta, extra_us)
        else:
            self._enqueue(data, src, dst, meta, 0)

    def inject(self, data: bytes, src: Address, dst: Address, meta: dict | None) -> None:
        """Adversary-originated transmission; still subject to link physics."""
        if len(data) <= self.profile.mtu:
            self._enqueue(data, src, dst, meta, 0)

    def _enqueue(self, data: bytes, src: Address, dst: Address,
                 meta: dict | None, extra_us: int) -> None:
        # capacity is effective payload rate: the link charges exactly the
        # bytes handed to it
        engine = self.network.engine
        wire_size = len(data)
        if self.queued_bytes + wire_size > self.profile.queue_bytes:
            self._drop(data, src, dst, meta, "QueueOverflow")
            return
        self.queued_bytes += wire_size
        sent_us = engine.now_us
        start = max(sent_us, self.busy_until_us)
        tx_us = int(round(wire_size * 8 * 1_000_000 / self.profile.capacity_bps))
        self.busy_until_us = start + tx_us
        engine.at(self.busy_until_us,
                  lambda: self._serialized(data, src, dst, meta, extra_us,
                                           wire_size, sent_us))

    def _serialized(self, data: bytes, src: Address, dst: Address,
                    meta: dict | None, extra_us: int, wire_size: int,
                    sent_us: int) -> None:
        engine = self.network.engine
        self.queued_bytes -= wire_size
        if self.rng.random() < self.profile.loss_rate:
            self._drop(data, src, dst, meta, "Loss", sent_us)
            return
        jitter_ms = self.profile.jitter.sample(self.rng)
        deliver = engine.now_us + int(
            round((self.profile.one_way_delay_ms + jitter_ms) * 1000))
        # a serial channel cannot reorder; keep deliveries monotone. An
        # adversary hold (extra_us) applies after the clamp: it detains that
        # one datagram without dragging later traffic behind it.
        deliver = max(deliver, self.last_delivery_us + 1)
        self.last_delivery_us = deliver
        engine.at(deliver + extra_us, lambda: self.network._deliver(data, src, dst, meta))

    def _drop(self, data: bytes, src: Address, dst: Address,
              meta: dict | None, reason: str, sent_us: int | None = None) -> None:
        now = self.network.engine.now_us
        self.network.record("drop", src=src, dst=dst, size=len(data),
                            reason=reason, link=self.label,
                            sent_us=now if sent_us is None else sent_us)


class Link:
    def __init__(self, network: "VirtualNetwork", ip_a: str, ip_b: str,
                 profile: LinkProfile, name: str):
        self.name = name
        self.ip_a = ip_a
        self.ip_b = ip_b
        seed = network.seed
        self.forward = LinkPath(network, profile, ip_b, f"{name}:{ip_a}>{ip_b}",
                                random.Random(crypto.sub_seed(seed, f"link:{name}:fwd")))
        self.reverse = LinkPath(network, profile, ip_a, f"{name}:{ip_b}>{ip_a}",
                                random.Random(crypto.sub_seed(seed, f"link:{name}:rev")))

    def path_from(self, ip: str) -> LinkPath | None:
        if ip == self.ip_a:
            return self.forward
        if ip == self.ip_b:
            return self.reverse
        return None


class VirtualNetwork:
    def __init__(self, engine: EventEngine, seed: int = 0):
        self.engine = engine
        self.seed = seed
        self.rng = random.Random(crypto.sub_seed(seed, "network"))
        self.hosts: dict[str, Host] = {}
        self.links: list[Link] = []
        self._paths: dict[tuple[str, str], LinkPath] = {}
        self.recorder: Callable[..., None] | None = None
        self._adversaries: dict[int, "Adversary"] = {}
        self._adv_ids = itertools.count(1)

    def add_host(self, name: str, ip: str) -> Host:
        if ip in self.hosts:
            raise ValueError(f"duplicate host ip {ip}")
        host = Host(self, name, ip)
        self.hosts[ip] = host
        return host

    def connect(self, ip_a: str, ip_b: str, profile: LinkProfile,
                name: str | None = None) -> Link:
        for ip in (ip_a, ip_b):
            if ip not in self.hosts:
                raise ValueError(f"unknown host {ip}")
        if (ip_a, ip_b) in self._paths or (ip_b, ip_a) in self._paths:
            raise ValueError(f"link {ip_a}<->{ip_b} already exists")
        link = Link(self, ip_a, ip_b, profile, name or f"{ip_a}--{ip_b}")
        self.links.append(link)
        self._paths[(ip_a, ip_b)] = link.forward
        self._paths[(ip_b, ip_a)] = link.reverse
        return link

    def link_between(self, ip_a: str, ip_b: str) -> Link | None:
        for link in self.links:
            if {link.ip_a, link.ip_b} == {ip_a, ip_b}:
                return link
        return None

    def send_datagram(self, data: bytes, src: Address, dst: Address,
                      meta: dict | None = None) -> None:
        self.record("tx", src=src, dst=dst, size=len(data))
        path = self._paths.get((src[0], dst[0]))
        if path is None:
            self.record("drop", src=src, dst=dst, size=len(data), reason="NoRoute")
            return
        path.send(data, src, dst, meta)

    def _deliver(self, data: bytes, src: Address, dst: Address, meta: dict | None) -> None:
        host = self.hosts.get(dst[0])
        if host is None:
            self.record("drop", src=src, dst=dst, size=len(data), reason="NoRoute")
            return
        host._deliver_udp(data, src, dst[1], meta)

    def record(self, kind: str, **fields) -> None:
        if self.recorder is not None:
            self.recorder(kind, self.engine.now_us, **fields)

    # adversary outcome correlation

    def register_adversary_action(self, action_id: int, adversary: "Adversary") -> None:
        self._adversaries[action_id] = adversary

    def report_outcome(self, meta: dict | None, accepted: bool, detail: str = "") -> None:
        if not meta or "adv_action" not in meta:
            return
        action_id = meta["adv_action"]
        adversary = self._adversaries.get(action_id)
        if adversary is not None:
            adversary.outcomes.append(
                {"action": action_id, "kind": meta.get("adv_kind", "?"),
                 "accepted": accepted, "detail": detail, "t_us": self.engine.now_us})


# ---------------------------------------------------------------------------
# adversary tap


@dataclass
class AdvAction:
    """One scripted move. `match` filters raw datagram bytes; `count` bounds
    how many datagrams the action touches (None = unlimited)."""

    kind: str  # observe | drop | delay | reorder | mitm | inject | replay
    match: Callable[[bytes], bool] | None = None
    count: int | None = None
    at_ms: float | None = None  # inject/replay: when to fire, relative to attach
    data: bytes = b""  # inject
    delay_ms: float = 0.0
    index: int = -1  # replay: captured-datagram index, -1 = latest
    rewrite: Callable[[bytes], bytes] | None = None  # mitm
    dst_port: int = 0  # inject/replay target port; 0 = last seen on the tap
    applied: int = field(default=0, init=False)
    action_id: int = field(default=-1, init=False)


class Adversary:
    """On-path Dolev-Yao attacker bound to one link direction.

    Pass-through actions (observe/drop/delay/reorder/mitm) are evaluated in
    script order against each datagram crossing the tap; the first matching
    drop/delay/mitm/reorder claims the datagram. Scheduled actions
    (inject/replay) fire at their `at_ms` and transmit onto the same path.
    Every datagram the adversary created or altered carries an action tag so
    the victim's verdict can be pulled back into `outcomes`.
    """

    def __init__(self, script: list[AdvAction], network: VirtualNetwork, path: LinkPath):
        self.script = script
        self.network = network
        self.path = path
        self.captured: list[bytes] = []
        self.outcomes: list[dict] = []
        self._reorder_held: tuple[bytes, dict | None, AdvAction] | None = None
        self._last_dst: Address | None = None
        base = network.engine.now_us
        for action in script:
            action.action_id = next(network._adv_ids)
            network.register_adversary_action(action.action_id, self)
            if action.kind in ("inject", "replay"):
                at_us = base + int(round((action.at_ms or 0.0) * 1000))
                network.engine.at(at_us, lambda a=action: self._fire(a))

    def _tag(self, action: AdvAction, meta: dict | None) -> dict:
        tagged = dict(meta or {})
        tagged["adv_action"] = action.action_id
        tagged["adv_kind"] = action.kind
        return tagged

    def _fire(self, action: AdvAction) -> None:
        if action.kind == "inject":
            data = action.data
        else:
            if not self.captured:
                self.outcomes.append({"action": action.action_id, "kind": action.kind,
                                      "accepted": False, "detail": "nothing captured",
                                      "t_us": self.network.engine.now_us})
                return
            data = self.captured[action.index]
        if action.dst_port:
            dst: Address = (self.path.dst_ip, action.dst_port)
        elif self._last_dst is not None:
            dst = self._last_dst
        else:
            dst = (self.path.dst_ip, 0)
        # source address forged; link physics still apply
        self.path.inject(data, ("0.0.0.0", 0), dst, self._tag(action, None))

    def tap(self, data: bytes, src: Address, dst: Address,
            meta: dict | None) -> list[tuple[bytes, dict | None, int]]:
        self._last_dst = dst
        out: list[tuple[bytes, dict | None, int]] = []
        held = self._reorder_held
        for action in self.script:
            if action.kind in ("inject", "replay"):
                continue
            if action.count is not None and action.applied >= action.count:
                continue
            if action.match is not None and not action.match(data):
                continue
            action.applied += 1
            if action.kind == "observe":
                self.captured.append(data)
                continue
            if action.kind == "drop":
                self.outcomes.append({"action": action.action_id, "kind": "drop",
                                      "accepted": False, "detail": "dropped by adversary",
                                      "t_us": self.network.engine.now_us})
                return out
            if action.kind == "delay":
                out.append((data, self._tag(action, meta),
                            int(round(action.delay_ms * 1000))))
                return out
            if action.kind == "mitm":
                assert action.rewrite is not None
                out.append((action.rewrite(data), self._tag(action, meta), 0))
                return out
            if action.kind == "reorder":
                if held is None:
                    self._reorder_held = (data, meta, action)
                    return out
                self._reorder_held = None
                out.append((data, meta, 0))
                out.append((held[0], self._tag(held[2], held[1]), 0))
                return out
        out.append((data, meta, 0))
        if held is not None and self._reorder_held is held:
            # release a held datagram behind the one that just passed
            self._reorder_held = None
            out.append((held[0], self._tag(held[2], held[1]), 0))
        return out


def run_adversary(script: list[AdvAction], link: Link | LinkPath,
                  network: VirtualNetwork | None = None) -> Adversary:
    """Attach a script to a link (forward direction) or a specific path."""
    path = link.forward if isinstance(link, Link) else link
    net = network or path.network
    adversary = Adversary(script, net, path)
    path.adversary = adversary
    return adversary


# ---------------------------------------------------------------------------
# reliable byte stream (stop-and-wait) over the datagram substrate


STREAM_MAGIC = 0xC5
_STREAM_HDR = struct.Struct("!BIIBH")
FLAG_SYN = 0x01
FLAG_ACK = 0x02
FLAG_FIN = 0x04
FLAG_DATA = 0x08
STREAM_MSS = 1200
STREAM_MAX_TX = 8
_RTO_MIN_US = 1_000_000
_RTO_MAX_US = 30_000_000
_RTO_INITIAL_US = 3_000_000


class StreamListener:
    def __init__(self, host: Host, port: int, on_accept):
        self.host = host
        self.port = port
        self.on_accept = on_accept
        self.sock: UdpSocket | None = None
        self.accepting = True

    def _on_datagram(self, data: bytes, src: Address, meta: dict | None) -> None:
        if len(data) < _STREAM_HDR.size:
            return
        magic, conn_id, seq, flags, _ = _STREAM_HDR.unpack_from(data)
        if magic != STREAM_MAGIC:
            return
        key = (src, conn_id)
        conn = self.host._streams.get(key)
        if conn is None:
            if not flags & FLAG_SYN or not self.accepting:
                return
            conn = StreamConn(self.host, self.sock, src, conn_id, initiator=False)
            self.host._streams[key] = conn
            self.on_accept(conn)
        conn._on_datagram(data, src, meta)

    def close(self) -> None:
        # accepted connections share this socket, so it stays open while any
        # of them is still alive; only new connections are refused
        self.accepting = False
        self.host._stream_listeners.pop(self.port, None)
        if self.sock is not None and not any(
                c.sock is self.sock for c in self.host._streams.values()):
            self.sock.close()


class StreamConn:
    """Reliable, in-order byte stream; one segment in flight per direction.

    The initiator opens with SYN (seq 0), the responder answers SYN|ACK, and
    data segments count from 1. RTO starts at 3 s, then tracks 2x the last
    measured round trip plus 1 s, clamped to [1 s, 30 s], doubling on each
    retransmission. A segment abandoned after 8 transmissions kills the
    connection.
    """

    def __init__(self, host: Host, sock: UdpSocket, peer: Address, conn_id: int,
                 initiator: bool, on_open=None, on_data=None, on_close=None):
        self.host = host
        self.sock = sock
        self.peer = peer
        self.conn_id = conn_id
        self.initiator = initiator
        self.on_open = on_open
        self.on_data = on_data
        self.on_close = on_close
        self.state = "connecting" if initiator else "open"
        self.tx_seq = 1
        self.rx_expected = 1
        self._tx_queue: list[bytes] = []  # pending application bytes
        self._inflight: tuple[int, bytes, int] | None = None  # seq, frame, tries
        self._timer: Timer | None = None
        self._rto_us = _RTO_INITIAL_US
        self._sent_at_us = 0
        self._fin_queued = False

    # outbound

    def send(self, data: bytes) -> None:
        if self.state == "closed":
            raise ValueError("stream is closed")
        self._tx_queue.append(data)
        self._pump()

    def close(self) -> None:
        if self.state == "closed":
            return
        if self.state == "connecting":
            # nothing established to tear down politely
            self._teardown("closed")
            return
        self._fin_queued = True
        self._pump()

    def _frame(self, seq: int, flags: int, payload: bytes = b"") -> bytes:
        return _STREAM_HDR.pack(STREAM_MAGIC, self.conn_id, seq, flags,
                                len(payload)) + payload

    def _start_connect(self) -> None:
        self._inflight = (0, self._frame(0, FLAG_SYN), 0)
        self._transmit()

    def _pump(self) -> None:
        if self._inflight is not None or self.state not in ("open",):
            return
        if self._tx_queue:
            chunk = b"".join(self._tx_queue)
            payload, rest = chunk[:STREAM_MSS], chunk[STREAM_MSS:]
            self._tx_queue = [rest] if rest else []
            self._inflight = (self.tx_seq, self._frame(self.tx_seq, FLAG_DATA, payload), 0)
            self.tx_seq += 1
            self._transmit()
        elif self._fin_queued:
            self._inflight = (self.tx_seq, self._frame(self.tx_seq, FLAG_FIN), 0)
            self.tx_seq += 1
            self._transmit()

    def _transmit(self) -> None:
        assert self._inflight is not None
        seq, frame, tries = self._inflight
        if tries >= STREAM_MAX_TX:
            self._teardown("timeout")
            return
        self._inflight = (seq, frame, tries + 1)
        self._sent_at_us = self.host.network.engine.now_us
        self.sock.sendto(frame, self.peer)
        rto = self._rto_us * (1 << tries)
        self._timer = self.host.network.engine.after_us(min(rto, _RTO_MAX_US),
                                                        self._transmit)

    # inbound

    def _on_datagram(self, data: bytes, src: Address, meta: dict | None) -> None:
        if len(data) < _STREAM_HDR.size:
            return
        magic, conn_id, seq, flags, length = _STREAM_HDR.unpack_from(data)
        if magic != STREAM_MAGIC or conn_id != self.conn_id:
            return
        payload = data[_STREAM_HDR.size:_STREAM_HDR.size + length]
        if len(payload) != length:
            return
        if flags & FLAG_ACK:
            self._on_ack(seq, flags)
            return
        if flags & FLAG_SYN:
            # responder side: (re-)acknowledge the opener
            self.sock.sendto(self._frame(0, FLAG_SYN | FLAG_ACK), src)
            return
        if flags & (FLAG_DATA | FLAG_FIN):
            if seq == self.rx_expected:
                self.rx_expected += 1
                self.sock.sendto(self._frame(seq, FLAG_ACK), src)
                if flags & FLAG_DATA and self.on_data is not None:
                    self.on_data(payload)
                if flags & FLAG_FIN:
                    self._teardown("fin")
            elif seq < self.rx_expected:
                self.sock.sendto(self._frame(seq, FLAG_ACK), src)
            # seq ahead of expected cannot happen under stop-and-wait; drop

    def _on_ack(self, seq: int, flags: int) -> None:
        if self._inflight is None or seq != self._inflight[0]:
            return
        frame_flags = self._inflight[1][9]  # flags byte of the acked frame
        engine = self.host.network.engine
        rtt = engine.now_us - self._sent_at_us
        self._rto_us = max(_RTO_MIN_US, min(_RTO_MAX_US, 2 * rtt + 1_000_000))
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        self._inflight = None
        if flags & FLAG_SYN and self.state == "connecting":
            self.state = "open"
            if self.on_open is not None:
                self.on_open(self)
        if frame_flags & FLAG_FIN:
            self._teardown("closed")
            return
        self._pump()

    def _teardown(self, reason: str) -> None:
        if self.state == "closed":
            return
        self.state = "closed"
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if self.on_close is not None:
            self.on_close(self, reason)
