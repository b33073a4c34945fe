"""Event collection and experiment statistics.

Every node and the network feed one `Collector`. Node events carry the
vocabulary emitted by the session and node layers (EstStart, EstDone,
MsgSent, MsgRecv, MsgDropped, RenewReqSent, RenewDone, CredUpdateSent,
CredUpdateApplied, RlSent, RlApplied, SessionClosed, ...); the network
contributes per-datagram transmit and drop records so loss accounting can
be closed against what the link actually did.

Extraction functions turn one run's records into scalar measurements
(connection time, handover components, renewal latencies, per-direction
goodput and loss). `ExperimentSummary` aggregates the same measurement
across repeated runs into mean / variance / stddev, and the emit helpers
render summaries as JSON and CSV with stable byte-for-byte output.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import wire

# wire framing overhead per datagram: header + timestamp + tag
DATAGRAM_OVERHEAD = wire.HEADER_LEN + wire.TRAILER_LEN

# receiver-side rejection reasons that consume a sent datagram
REJECT_REASONS = frozenset({
    "Malformed", "BadTag", "Stale", "Duplicate", "UnknownType", "Unauthorized",
})


class MetricError(Exception):
    """An expected event never happened; the run cannot be scored."""


@dataclass(frozen=True)
class EventRecord:
    """One observation: `node` reported `event` at virtual epoch-ms `t`."""

    node: str
    event: str
    t: int
    fields: dict


@dataclass(frozen=True)
class LinkRecord:
    """One network-level observation (transmit or drop) at `t_us`.

    `sent_us` is when the datagram entered the link; for drops decided
    after serialization it differs from `t_us`.
    """

    kind: str
    t_us: int
    src: tuple
    dst: tuple
    size: int
    reason: str = ""
    link: str = ""
    sent_us: int = 0


class Collector:
    """Single sink for node events and network records."""

    def __init__(self) -> None:
        self.records: list[EventRecord] = []
        self.link_records: list[LinkRecord] = []

    # signature matches the node event_sink contract
    def sink(self, node: str, name: str, t: int, fields: dict) -> None:
        self.records.append(EventRecord(node, name, int(t), dict(fields)))

    # signature matches VirtualNetwork.recorder
    def link_sink(self, kind: str, t_us: int, **fields) -> None:
        self.link_records.append(LinkRecord(
            kind, int(t_us),
            tuple(fields.get("src", ())), tuple(fields.get("dst", ())),
            int(fields.get("size", 0)),
            str(fields.get("reason", "")), str(fields.get("link", "")),
            int(fields.get("sent_us", t_us))))

    def of(self, event: str | None = None, node: str | None = None,
           **field_eq) -> list[EventRecord]:
        out = []
        for rec in self.records:
            if event is not None and rec.event != event:
                continue
            if node is not None and rec.node != node:
                continue
            if any(rec.fields.get(k) != v for k, v in field_eq.items()):
                continue
            out.append(rec)
        return out


def select(records: Iterable[EventRecord], event: str | None = None,
           node: str | None = None, after: int | None = None,
           **field_eq) -> list[EventRecord]:
    out = []
    for rec in records:
        if event is not None and rec.event != event:
            continue
        if node is not None and rec.node != node:
            continue
        if after is not None and rec.t < after:
            continue
        if any(rec.fields.get(k) != v for k, v in field_eq.items()):
            continue
        out.append(rec)
    return out


def first(records: Iterable[EventRecord], event: str, node: str | None = None,
          after: int | None = None, **field_eq) -> EventRecord:
    hits = select(records, event, node, after, **field_eq)
    if not hits:
        where = f" at {node}" if node else ""
        raise MetricError(f"no {event}{where} matching {field_eq or '{}'}")
    return hits[0]


def validate_trace(records: Sequence[EventRecord]) -> None:
    """Event times must be monotone per node (the emitters share one clock)."""
    last: dict[str, int] = {}
    for rec in records:
        prev = last.get(rec.node)
        if prev is not None and rec.t < prev:
            raise MetricError(
                f"time went backwards at {rec.node}: {prev} -> {rec.t} ({rec.event})")
        last[rec.node] = rec.t


def trace_line(record: EventRecord, run: int | None = None) -> str:
    doc: dict = {"node": record.node, "event": record.event, "t": record.t}
    doc.update(record.fields)
    if run is not None:
        doc["run"] = run
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def trace_lines(records: Iterable[EventRecord], run: int | None = None) -> list[str]:
    return [trace_line(rec, run) for rec in records]


# --- aggregate statistics ---------------------------------------------------


@dataclass(frozen=True)
class ExperimentSummary:
    """One metric over repeated runs; stddev is sqrt(variance) by construction."""

    metric: str
    runs: tuple[float, ...]
    mean: float
    variance: float
    stddev: float

    @classmethod
    def of(cls, metric: str, values: Iterable[float]) -> "ExperimentSummary":
        runs = tuple(float(v) for v in values)
        if not runs:
            raise MetricError(f"no runs for metric {metric}")
        mean = statistics.fmean(runs)
        variance = statistics.variance(runs) if len(runs) > 1 else 0.0
        return cls(metric, runs, mean, variance, math.sqrt(variance))

    def as_dict(self) -> dict:
        return {"metric": self.metric, "runs": list(self.runs),
                "mean": self.mean, "variance": self.variance,
                "stddev": self.stddev}


def handover_bounds(mean_a: float, mean_b: float) -> tuple[float, float]:
    """Component means bracket the end-to-end interval: [max, sum]."""
    return max(mean_a, mean_b), mean_a + mean_b


# --- single-run extraction --------------------------------------------------


def connection_time_ms(records: Sequence[EventRecord], client: str,
                       server: str) -> float:
    start = first(records, "EstStart", node=client, peer=server)
    done = first(records, "EstDone", node=client, after=start.t, peer=server)
    return float(done.t - start.t)


def chain_connection_ms(records: Sequence[EventRecord],
                        pairs: Sequence[tuple[str, str]]) -> float:
    """Wall time to stand up a chain of sessions, first order to last key."""
    starts, dones = [], []
    for client, server in pairs:
        start = first(records, "EstStart", node=client, peer=server)
        done = first(records, "EstDone", node=client, after=start.t, peer=server)
        starts.append(start.t)
        dones.append(done.t)
    return float(max(dones) - min(starts))


def renewal_times_ms(records: Sequence[EventRecord], client: str,
                     server: str) -> dict[str, float]:
    """Latencies of one key renewal, all relative to the client's request.

    `request_delay` is the one-way flight time of the renewal request;
    `client` / `server` are the times until each side commits to the new
    keys (the server commits on the first datagram verified under them).
    """
    req = first(records, "RenewReqSent", node=client, peer=server)
    sent = first(records, "MsgSent", node=client, after=req.t,
                 msg_type=wire.KEY_RENEWAL_REQ, peer=server)
    recv = first(records, "MsgRecv", node=server, after=sent.t,
                 msg_type=wire.KEY_RENEWAL_REQ, peer=client)
    client_done = first(records, "RenewDone", node=client, after=req.t,
                        side="client", peer=server)
    server_done = first(records, "RenewDone", node=server, after=req.t,
                        side="server", peer=client)
    return {
        "request_delay": float(recv.t - sent.t),
        "client": float(client_done.t - req.t),
        "server": float(server_done.t - req.t),
    }


def handover_times_ms(records: Sequence[EventRecord], method: str,
                      predecessor: str, successor: str,
                      uxv: str) -> dict[str, float]:
    """Control-handover components and end-to-end interval for one run.

    Revocation method: the predecessor's session dies by revocation list
    while the successor establishes a fresh session. Both actions are
    issued back to back, so each component runs from the command instant:
    command-to-closure and command-to-established.

    CapacityUpdate method: both stations keep their sessions and swap
    capabilities; components are the time until each station has applied
    its reissued credential. The interval ends when every affected node
    (both stations and the vehicle) has applied its update.
    """
    if method == "Revocation":
        cmds = select(records, "CmdIssued", cmd="RevokeCredential")
        if not cmds:
            raise MetricError("no RevokeCredential command issued")
        t0 = cmds[0].t
        closed = first(records, "SessionClosed", node=predecessor, after=t0,
                       peer=uxv, reason="Revoked")
        est_done = first(records, "EstDone", node=successor, after=t0, peer=uxv)
        return {
            "revocation": float(closed.t - t0),
            "connection": float(est_done.t - t0),
            "total": float(max(closed.t, est_done.t) - t0),
        }
    if method == "CapacityUpdate":
        cmds = select(records, "CmdIssued", cmd="ChangeCapacity")
        if not cmds:
            raise MetricError("no ChangeCapacity command issued")
        t0 = cmds[0].t
        pred = first(records, "CredUpdateApplied", node=predecessor, after=t0)
        succ = first(records, "CredUpdateApplied", node=successor, after=t0)
        applied = select(records, "CredUpdateApplied", after=t0)
        affected = [rec.t for rec in applied if rec.node in (predecessor, successor, uxv)]
        return {
            "relinquish": float(pred.t - t0),
            "assume": float(succ.t - t0),
            "total": float(max(affected) - t0),
        }
    raise MetricError(f"unknown handover method {method!r}")


@dataclass(frozen=True)
class DirectionStats:
    """Datagram accounting for one traffic direction over a time window."""

    sent_count: int
    recv_count: int
    reject_count: int
    link_drop_count: int
    sent_payload_bits: int
    delivered_payload_bits: int
    duration_ms: int

    @property
    def loss_fraction(self) -> float:
        if self.sent_count == 0:
            return 0.0
        return 1.0 - self.recv_count / self.sent_count

    @property
    def goodput_bps(self) -> float:
        if self.duration_ms <= 0:
            return 0.0
        return self.delivered_payload_bits * 1000.0 / self.duration_ms

    @property
    def offered_bps(self) -> float:
        if self.duration_ms <= 0:
            return 0.0
        return self.sent_payload_bits * 1000.0 / self.duration_ms

    @property
    def accounting_closes(self) -> bool:
        return self.sent_count == (self.recv_count + self.reject_count
                                   + self.link_drop_count)


def direction_stats(records: Sequence[EventRecord], src: str, dst: str,
                    window: tuple[int, int],
                    msg_type: int | None = None,
                    link_records: Sequence[LinkRecord] = (),
                    src_ip: str | None = None,
                    dst_ip: str | None = None) -> DirectionStats:
    """Count one direction of session traffic inside [window). Sends and
    deliveries are both attributed to the datagram's wire timestamp (the
    stamp the receiver authenticates), so a window slices cleanly through
    traffic in flight and both ends agree on membership. Link drops are
    matched by IP pair when the addresses are given, so the window must
    not contain non-session traffic on that pair."""
    lo, hi = window

    def in_window(t: int) -> bool:
        return lo <= t < hi

    def type_ok(rec: EventRecord) -> bool:
        return msg_type is None or rec.fields.get("msg_type") == msg_type

    sent = [r for r in select(records, "MsgSent", node=src, peer=dst)
            if in_window(r.fields.get("sent_t", r.t)) and type_ok(r)]
    recv = [r for r in select(records, "MsgRecv", node=dst, peer=src)
            if in_window(r.fields.get("sent_t", r.t)) and type_ok(r)]
    rejects = [r for r in select(records, "MsgDropped", node=dst, peer=src)
               if in_window(r.t) and r.fields.get("reason") in REJECT_REASONS
               and not r.fields.get("local")]
    drops = 0
    if src_ip is not None and dst_ip is not None:
        for rec in link_records:
            if (rec.kind == "drop" and rec.src[:1] == (src_ip,)
                    and rec.dst[:1] == (dst_ip,)
                    and in_window(rec.sent_us // 1000)):
                drops += 1

    def payload_bits(recs: Sequence[EventRecord]) -> int:
        return sum(max(0, r.fields.get("bytes", 0) - DATAGRAM_OVERHEAD) * 8
                   for r in recs)

    return DirectionStats(
        sent_count=len(sent), recv_count=len(recv), reject_count=len(rejects),
        link_drop_count=drops, sent_payload_bits=payload_bits(sent),
        delivered_payload_bits=payload_bits(recv), duration_ms=hi - lo)


def cpu_stats(runtime_stats: dict[str, tuple]) -> dict[str, dict]:
    """Per-node processing statistics.

    Input tuples are (jobs, busy_us, waited_us[, rx_jobs, rx_busy_us]);
    the rx pair isolates datagram handling from one-off work such as
    signing, so `mean_rx_ms` is the per-message processing cost.
    """
    out = {}
    for node in sorted(runtime_stats):
        jobs, busy_us, waited_us, *rx = runtime_stats[node]
        rx_jobs, rx_busy_us = (rx + [0, 0])[:2]
        out[node] = {
            "jobs": jobs,
            "mean_busy_ms": busy_us / jobs / 1000.0 if jobs else 0.0,
            "mean_wait_ms": waited_us / jobs / 1000.0 if jobs else 0.0,
            "rx_jobs": rx_jobs,
            "mean_rx_ms": rx_busy_us / rx_jobs / 1000.0 if rx_jobs else 0.0,
        }
    return out


# --- emission ---------------------------------------------------------------


def summaries_to_json(name: str, seed, summaries: Sequence[ExperimentSummary],
                      derived: dict | None = None) -> str:
    doc = {
        "scenario": name,
        "seed": seed,
        "summaries": [s.as_dict() for s in summaries],
        "derived": derived or {},
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def summaries_to_csv(summaries: Sequence[ExperimentSummary]) -> str:
    width = max((len(s.runs) for s in summaries), default=0)
    header = ["metric", "mean", "variance", "stddev"]
    header += [f"run{i}" for i in range(width)]
    lines = [",".join(header)]
    for s in summaries:
        row = [s.metric, repr(s.mean), repr(s.variance), repr(s.stddev)]
        row += [repr(v) for v in s.runs]
        row += [""] * (width - len(s.runs))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def format_summary_table(named: Sequence[tuple[str, Sequence[dict]]]) -> str:
    """Fixed-width comparison table over per-scenario summary dicts."""
    rows: list[tuple[str, str, str, str, str]] = []
    for scenario, summaries in named:
        for s in summaries:
            runs = s.get("runs", [])
            spread = f"[{min(runs):.1f}, {max(runs):.1f}]" if runs else "-"
            rows.append((scenario, s["metric"], f"{s['mean']:.1f}",
                         f"{s['stddev']:.2f}", spread))
    headers = ("scenario", "metric", "mean", "stddev", "range")
    cols = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
            for i, h in enumerate(headers)]
    out = ["  ".join(h.ljust(cols[i]) for i, h in enumerate(headers))]
    out.append("  ".join("-" * c for c in cols))
    for row in rows:
        out.append("  ".join(cell.ljust(cols[i]) for i, cell in enumerate(row)))
    return "\n".join(out) + "\n"
