"""Declarative experiment scenarios over the emulated network.

A scenario is a JSON document naming the nodes, the links between them
(with a radio profile each), timed commander actions, optional on-path
adversary scripts, the metrics to extract and the checks that must hold
on the aggregated results. `run_scenario` executes it `runs` times with
per-run derived seeds, collects every node and network event, and scores
the runs into `ExperimentSummary` rows. Identical document plus seed
yields byte-identical traces and summaries.

Schema errors raise `SchemaError` carrying the offending JSON path (and
the source line for parse errors); a run whose expected events never
happen raises `ScenarioFailure` carrying the trace of the failing run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from . import artifacts, crypto, emulator, metrics, nodes, policy, wire
from .artifacts import NodeIdentity, Role

DEFAULT_RUNS = 7

PROFILES = {"WIFI": emulator.WIFI, "RADIO": emulator.RADIO}

# identities a scenario can pull in by name
NODE_REGISTRY = {
    ident.common_name: ident
    for ident in artifacts.default_node_list() + [
        NodeIdentity("GCS2", "10.10.2.21", Role.GCS),
        NodeIdentity("UXV2", "10.10.3.31", Role.UXV),
    ]
}

COMMANDS = {
    "NewConnection": {"client", "server", "capacity", "capacity_bps",
                      "lifetime_ms", "route"},
    "RevokeCredential": {"client", "server"},
    "RevokeCertificate": {"cn"},
    "ChangeCapacity": {"uxv", "predecessor", "successor", "monitor_cap",
                       "control_cap"},
    "RenewArtifacts": set(),
    "CommandStream": {"from", "to", "rate_hz", "payload_bytes", "until_ms"},
}

ADV_KINDS = {"observe", "drop", "delay", "reorder", "mitm", "inject", "replay"}

METRIC_NAMES = {"connection", "chain_connection", "renewal", "handover",
                "goodput", "cpu"}

CHECK_KEYS = {"metric", "derived", "mean_between", "mean_at_most",
              "mean_at_least", "contained", "closed"}

_TOP_KEYS = {"name", "description", "seed", "runs", "duration_ms", "nodes",
             "links", "node_config", "actions", "adversary", "metrics",
             "checks"}

_NODE_CONFIG_KEYS = {"filter_interval_ms", "key_lifetime_ms",
                     "rl_lifetime_ms", "autopilot"}
_AUTOPILOT_KEYS = {"heartbeat_hz", "gps_hz", "bulk_hz", "bulk_payload"}


class SchemaError(Exception):
    """Scenario document violates the schema; `path` locates the fault."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ScenarioFailure(Exception):
    """A run could not be scored; carries the failing run's trace."""

    def __init__(self, message: str, trace: Sequence[str] = ()):
        self.trace = list(trace)
        super().__init__(message)


def _need(doc: dict, key: str, kind, path: str):
    if key not in doc:
        raise SchemaError(path, f"missing required key {key!r}")
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(f"{path}.{key}", f"expected {kind.__name__}")
    return value


def _opt(doc: dict, key: str, kind, default, path: str):
    if key not in doc:
        return default
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(f"{path}.{key}", f"expected {kind.__name__}")
    return value


def _num(owner: dict, key: str, path: str, lo=None, hi=None, default=None):
    if key not in owner:
        return default
    value = owner[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{path}.{key}", "expected a number")
    if lo is not None and value < lo:
        raise SchemaError(f"{path}.{key}", f"must be >= {lo}")
    if hi is not None and value > hi:
        raise SchemaError(f"{path}.{key}", f"must be <= {hi}")
    return value


def validate_scenario(doc: dict, where: str = "scenario") -> dict:
    """Check the document against the schema; returns it unchanged."""
    if not isinstance(doc, dict):
        raise SchemaError(where, "document must be a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise SchemaError(f"{where}.{key}", "unknown key")
    _need(doc, "name", str, where)
    _need(doc, "seed", int, where)
    duration = _need(doc, "duration_ms", int, where)
    if duration <= 0:
        raise SchemaError(f"{where}.duration_ms", "must be positive")
    runs = _opt(doc, "runs", int, DEFAULT_RUNS, where)
    if runs < 1:
        raise SchemaError(f"{where}.runs", "must be >= 1")

    cns = _validate_nodes(_need(doc, "nodes", list, where), where)
    link_pairs = _validate_links(_need(doc, "links", list, where), cns, where)
    _validate_node_config(_opt(doc, "node_config", dict, {}, where), cns, where)
    _validate_actions(_opt(doc, "actions", list, [], where), cns, duration, where)
    _validate_adversary(_opt(doc, "adversary", list, [], where), link_pairs, where)
    _validate_metrics(_opt(doc, "metrics", list, [], where), cns, duration, where)
    _validate_checks(_opt(doc, "checks", list, [], where), where)
    return doc


def _validate_nodes(entries: list, where: str) -> dict[str, NodeIdentity]:
    if not entries:
        raise SchemaError(f"{where}.nodes", "at least one node required")
    cns: dict[str, NodeIdentity] = {}
    for i, entry in enumerate(entries):
        path = f"{where}.nodes[{i}]"
        if isinstance(entry, str):
            ident = NODE_REGISTRY.get(entry)
            if ident is None:
                known = ", ".join(sorted(NODE_REGISTRY))
                raise SchemaError(path, f"unknown node {entry!r} (known: {known})")
        elif isinstance(entry, dict):
            for key in entry:
                if key not in {"cn", "ip", "role"}:
                    raise SchemaError(f"{path}.{key}", "unknown key")
            cn = _need(entry, "cn", str, path)
            ip = _need(entry, "ip", str, path)
            role_name = _need(entry, "role", str, path)
            try:
                role = Role[role_name.upper()]
            except KeyError:
                raise SchemaError(f"{path}.role", f"unknown role {role_name!r}")
            ident = NodeIdentity(cn, ip, role)
        else:
            raise SchemaError(path, "expected a node name or object")
        if ident.common_name in cns:
            raise SchemaError(path, f"duplicate node {ident.common_name!r}")
        cns[ident.common_name] = ident
    if sum(1 for n in cns.values() if n.role is Role.CT1) > 1:
        raise SchemaError(f"{where}.nodes", "at most one commander authority")
    return cns


def _validate_links(entries: list, cns: dict, where: str) -> set[frozenset]:
    pairs: set[frozenset] = set()
    for i, entry in enumerate(entries):
        path = f"{where}.links[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(path, "expected an object")
        for key in entry:
            if key not in {"a", "b", "profile", "one_way_delay_ms",
                           "capacity_bps", "loss_rate", "mtu", "queue_bytes"}:
                raise SchemaError(f"{path}.{key}", "unknown key")
        a = _need(entry, "a", str, path)
        b = _need(entry, "b", str, path)
        for end, cn in (("a", a), ("b", b)):
            if cn not in cns:
                raise SchemaError(f"{path}.{end}", f"unknown node {cn!r}")
        if a == b:
            raise SchemaError(path, "link endpoints must differ")
        pair = frozenset((a, b))
        if pair in pairs:
            raise SchemaError(path, f"duplicate link {a}-{b}")
        pairs.add(pair)
        profile = _need(entry, "profile", str, path)
        if profile not in PROFILES:
            known = ", ".join(sorted(PROFILES))
            raise SchemaError(f"{path}.profile",
                              f"unknown profile {profile!r} (known: {known})")
        _num(entry, "one_way_delay_ms", path, lo=0)
        _num(entry, "capacity_bps", path, lo=1)
        _num(entry, "loss_rate", path, lo=0.0, hi=1.0)
        _num(entry, "mtu", path, lo=64)
        _num(entry, "queue_bytes", path, lo=64)
    return pairs


def _validate_node_config(config: dict, cns: dict, where: str) -> None:
    for cn, entry in config.items():
        path = f"{where}.node_config.{cn}"
        if cn != "*" and cn not in cns:
            raise SchemaError(path, f"unknown node {cn!r}")
        if not isinstance(entry, dict):
            raise SchemaError(path, "expected an object")
        for key, value in entry.items():
            if key not in _NODE_CONFIG_KEYS:
                raise SchemaError(f"{path}.{key}", "unknown key")
            if key == "autopilot":
                if not isinstance(value, dict):
                    raise SchemaError(f"{path}.autopilot", "expected an object")
                for sub in value:
                    if sub not in _AUTOPILOT_KEYS:
                        raise SchemaError(f"{path}.autopilot.{sub}", "unknown key")
                    _num(value, sub, f"{path}.autopilot", lo=0)
            else:
                _num(entry, key, path, lo=1)


def _validate_actions(entries: list, cns: dict, duration: int, where: str) -> None:
    for i, entry in enumerate(entries):
        path = f"{where}.actions[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(path, "expected an object")
        at_ms = _need(entry, "at_ms", int, path)
        if not 0 <= at_ms <= duration:
            raise SchemaError(f"{path}.at_ms", "outside the scenario window")
        cmd = _need(entry, "cmd", str, path)
        allowed = COMMANDS.get(cmd)
        if allowed is None:
            known = ", ".join(sorted(COMMANDS))
            raise SchemaError(f"{path}.cmd", f"unknown command {cmd!r} (known: {known})")
        for key in entry:
            if key not in allowed | {"at_ms", "cmd"}:
                raise SchemaError(f"{path}.{key}", f"not a {cmd} parameter")
        node_refs = {"client", "server", "cn", "uxv", "predecessor",
                     "successor", "from", "to"}
        for key in allowed & node_refs:
            if key in entry:
                value = entry[key]
                if not isinstance(value, str) or value not in cns:
                    raise SchemaError(f"{path}.{key}", f"unknown node {value!r}")
        if cmd == "CommandStream":
            for key in ("from", "to"):
                if key not in entry:
                    raise SchemaError(path, f"missing required key {key!r}")
            rate = _num(entry, "rate_hz", path, lo=0.001, default=1.0)
            if rate is None:
                raise SchemaError(f"{path}.rate_hz", "expected a number")
            _num(entry, "payload_bytes", path, lo=0, hi=255)
            until = _num(entry, "until_ms", path, lo=at_ms + 1, hi=duration)
            if until is None and "until_ms" in entry:
                raise SchemaError(f"{path}.until_ms", "expected a number")


def _validate_adversary(entries: list, link_pairs: set, where: str) -> None:
    for i, entry in enumerate(entries):
        path = f"{where}.adversary[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(path, "expected an object")
        for key in entry:
            if key not in {"a", "b", "direction", "script"}:
                raise SchemaError(f"{path}.{key}", "unknown key")
        a = _need(entry, "a", str, path)
        b = _need(entry, "b", str, path)
        if frozenset((a, b)) not in link_pairs:
            raise SchemaError(path, f"no link {a}-{b} declared")
        direction = _opt(entry, "direction", str, "forward", path)
        if direction not in ("forward", "reverse"):
            raise SchemaError(f"{path}.direction", "forward or reverse")
        script = _need(entry, "script", list, path)
        for j, action in enumerate(script):
            apath = f"{path}.script[{j}]"
            if not isinstance(action, dict):
                raise SchemaError(apath, "expected an object")
            kind = _need(action, "kind", str, apath)
            if kind not in ADV_KINDS:
                raise SchemaError(f"{apath}.kind", f"unknown kind {kind!r}")
            for key in action:
                if key not in {"kind", "match_type", "match_min_len", "count",
                               "at_ms", "data_hex", "delay_ms", "index",
                               "flip_bit", "truncate", "dst_port"}:
                    raise SchemaError(f"{apath}.{key}", "unknown key")
            if kind == "inject" and "data_hex" not in action:
                raise SchemaError(apath, "inject needs data_hex")
            if kind == "mitm" and not ({"flip_bit", "truncate"} & action.keys()):
                raise SchemaError(apath, "mitm needs flip_bit or truncate")
            if "data_hex" in action:
                try:
                    bytes.fromhex(action["data_hex"])
                except (TypeError, ValueError):
                    raise SchemaError(f"{apath}.data_hex", "invalid hex string")


def _validate_metrics(entries: list, cns: dict, duration: int, where: str) -> None:
    for i, entry in enumerate(entries):
        path = f"{where}.metrics[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(path, "expected an object")
        name = _need(entry, "name", str, path)
        if name not in METRIC_NAMES:
            known = ", ".join(sorted(METRIC_NAMES))
            raise SchemaError(f"{path}.name", f"unknown metric {name!r} (known: {known})")
        def ref(key):
            value = _need(entry, key, str, path)
            if value not in cns:
                raise SchemaError(f"{path}.{key}", f"unknown node {value!r}")
            return value
        if name == "connection":
            ref("client"), ref("server")
        elif name == "chain_connection":
            pairs = _need(entry, "pairs", list, path)
            if not pairs:
                raise SchemaError(f"{path}.pairs", "at least one pair")
            for j, pair in enumerate(pairs):
                if (not isinstance(pair, list) or len(pair) != 2
                        or any(p not in cns for p in pair)):
                    raise SchemaError(f"{path}.pairs[{j}]",
                                      "expected [client, server] of known nodes")
        elif name == "renewal":
            ref("client"), ref("server")
        elif name == "handover":
            method = _need(entry, "method", str, path)
            if method not in ("Revocation", "CapacityUpdate"):
                raise SchemaError(f"{path}.method", "Revocation or CapacityUpdate")
            ref("predecessor"), ref("successor"), ref("uxv")
        elif name == "goodput":
            ref("src"), ref("dst")
            window = _need(entry, "window_ms", list, path)
            if (len(window) != 2 or not all(isinstance(v, int) for v in window)
                    or not 0 <= window[0] < window[1] <= duration):
                raise SchemaError(f"{path}.window_ms",
                                  "expected [start, end] inside the scenario window")
            if "msg_type" in entry and entry["msg_type"] is not None:
                _num(entry, "msg_type", path, lo=0, hi=255)


def _validate_checks(entries: list, where: str) -> None:
    for i, entry in enumerate(entries):
        path = f"{where}.checks[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(path, "expected an object")
        for key in entry:
            if key not in CHECK_KEYS:
                raise SchemaError(f"{path}.{key}", "unknown key")
        if ("metric" in entry) == ("derived" in entry):
            raise SchemaError(path, "exactly one of metric/derived required")
        if "metric" in entry:
            if not ({"mean_between", "mean_at_most", "mean_at_least"}
                    & entry.keys()):
                raise SchemaError(path, "no condition given")
            if "mean_between" in entry:
                rng = entry["mean_between"]
                if (not isinstance(rng, list) or len(rng) != 2
                        or not all(isinstance(v, (int, float)) for v in rng)):
                    raise SchemaError(f"{path}.mean_between", "expected [lo, hi]")
        else:
            if not ({"contained", "closed"} & entry.keys()):
                raise SchemaError(path, "no condition given")


def load_scenario(path: str | Path) -> dict:
    """Read and validate a scenario file; parse errors carry line numbers."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(str(path), f"cannot read: {exc}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg)
    return validate_scenario(doc, where=path.name)


# --- execution --------------------------------------------------------------


@dataclass
class RunResult:
    """Everything one run produced."""

    index: int
    seed: int
    collector: metrics.Collector
    runtime_stats: dict[str, tuple[int, int, int]]
    adversaries: list = field(default_factory=list)

    @property
    def records(self):
        return self.collector.records

    @property
    def link_records(self):
        return self.collector.link_records


@dataclass
class ScenarioResult:
    """All runs of one scenario plus the aggregated summaries."""

    name: str
    seed: int
    runs: list[RunResult]
    summaries: list[metrics.ExperimentSummary]
    derived: dict
    check_failures: list[str]

    def summary(self, metric: str) -> metrics.ExperimentSummary:
        for s in self.summaries:
            if s.metric == metric:
                return s
        raise KeyError(metric)

    def trace_lines(self) -> list[str]:
        lines = []
        for run in self.runs:
            lines.extend(metrics.trace_lines(run.records, run=run.index))
        return lines

    def summary_json(self) -> str:
        return metrics.summaries_to_json(self.name, self.seed, self.summaries,
                                         self.derived)

    def summary_csv(self) -> str:
        return metrics.summaries_to_csv(self.summaries)

    def write(self, outdir: str | Path) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        trace = outdir / "trace.jsonl"
        trace.write_text("".join(line + "\n" for line in self.trace_lines()))
        summary_json = outdir / "summary.json"
        summary_json.write_text(self.summary_json())
        summary_csv = outdir / "summary.csv"
        summary_csv.write_text(self.summary_csv())
        return [trace, summary_json, summary_csv]


def _scenario_identities(doc: dict) -> list[NodeIdentity]:
    out = []
    for entry in doc["nodes"]:
        if isinstance(entry, str):
            out.append(NODE_REGISTRY[entry])
        else:
            out.append(NodeIdentity(entry["cn"], entry["ip"],
                       Role[entry["role"].upper()]))
    return out


def _link_profile(entry: dict) -> emulator.LinkProfile:
    profile = PROFILES[entry["profile"]]
    overrides = {k: entry[k] for k in ("one_way_delay_ms", "capacity_bps",
                                       "loss_rate", "mtu", "queue_bytes")
                 if k in entry}
    if "capacity_bps" in overrides:
        overrides["capacity_bps"] = float(overrides["capacity_bps"])
    return replace(profile, **overrides) if overrides else profile


def _node_kwargs(doc: dict, cn: str) -> dict:
    config = doc.get("node_config", {})
    merged = dict(config.get("*", {}))
    merged.update(config.get(cn, {}))
    kw = {}
    if "filter_interval_ms" in merged:
        kw["filter_interval_ms"] = int(merged["filter_interval_ms"])
    if "key_lifetime_ms" in merged:
        kw["key_lifetime_ms"] = int(merged["key_lifetime_ms"])
    if "rl_lifetime_ms" in merged:
        kw["rl_lifetime_ms"] = int(merged["rl_lifetime_ms"])
    if "autopilot" in merged:
        kw["autopilot_config"] = dict(merged["autopilot"])
    return kw


def _adv_action(spec: dict) -> emulator.AdvAction:
    match = None
    if "match_type" in spec or "match_min_len" in spec:
        want_type = spec.get("match_type")
        min_len = spec.get("match_min_len", 0)

        def match(data: bytes, _t=want_type, _n=min_len) -> bool:
            if len(data) < _n:
                return False
            return _t is None or (len(data) > 0 and data[0] == _t)

    rewrite = None
    if spec["kind"] == "mitm":
        if "flip_bit" in spec:
            bit = int(spec["flip_bit"])

            def rewrite(data: bytes, _bit=bit) -> bytes:
                if not data:
                    return data
                i = (_bit // 8) % len(data)
                out = bytearray(data)
                out[i] ^= 1 << (_bit % 8)
                return bytes(out)
        else:
            cut = int(spec["truncate"])

            def rewrite(data: bytes, _cut=cut) -> bytes:
                return data[:_cut]

    return emulator.AdvAction(
        kind=spec["kind"],
        match=match,
        count=spec.get("count"),
        at_ms=spec.get("at_ms"),
        data=bytes.fromhex(spec.get("data_hex", "")),
        delay_ms=float(spec.get("delay_ms", 0.0)),
        index=int(spec.get("index", -1)),
        dst_port=int(spec.get("dst_port", 0)),
    )


class _Stream:
    """Periodic application datagrams from one node to a session peer."""

    def __init__(self, engine, node, to_cn: str, rate_hz: float,
                 payload_bytes: int, until_us: int):
        self.engine = engine
        self.node = node
        self.to_cn = to_cn
        self.period_us = max(1, int(round(1_000_000 / rate_hz)))
        self.payload = bytes(payload_bytes)
        self.until_us = until_us
        self.seq = 0
        self._tick()

    def _tick(self) -> None:
        if self.engine.now_us > self.until_us:
            return
        sess = self.node.sessions.get(self.to_cn)
        if sess is not None:
            frame = nodes.build_frame(70, self.payload, self.seq & 0xFF)
            self.seq += 1
            sess.send_message(wire.DATA, frame)
        self.engine.at(self.engine.now_us + self.period_us, self._tick)


def _run_once(doc: dict, mission: artifacts.Mission, index: int,
              run_seed: int) -> RunResult:
    engine = emulator.EventEngine(start_ms=artifacts.DETERMINISTIC_EPOCH_MS)
    collector = metrics.Collector()
    net = emulator.VirtualNetwork(engine, seed=run_seed)
    net.recorder = collector.link_sink

    identities = _scenario_identities(doc)
    hosts = {}
    for ident in identities:
        hosts[ident.common_name] = net.add_host(ident.common_name,
                                                ident.ip_address)
    for entry in doc["links"]:
        net.connect(hosts[entry["a"]].ip, hosts[entry["b"]].ip,
                    _link_profile(entry))

    def ca_signer(serials, validity):
        return artifacts.build_certrl(mission.ca_key, serials, validity)

    built: dict[str, nodes.Node] = {}
    ct1_cn = None
    for ident in identities:
        cn = ident.common_name
        kw = _node_kwargs(doc, cn)
        if ident.role is Role.CT1:
            kw.setdefault("ca_signer", ca_signer)
            ct1_cn = cn
        built[cn] = nodes.make_node(mission.bundles[cn], hosts[cn], engine,
                                    seed=run_seed, event_sink=collector.sink,
                                    **kw)
    for node in built.values():
        node.start()

    for entry in doc.get("adversary", []):
        link = net.link_between(hosts[entry["a"]].ip, hosts[entry["b"]].ip)
        path = (link.forward if entry.get("direction", "forward") == "forward"
                else link.reverse)
        script = [_adv_action(spec) for spec in entry["script"]]
        emulator.run_adversary(script, path, net)

    t0_us = engine.now_us
    failures: list[str] = []

    def issue(action: dict) -> None:
        cmd = {k: v for k, v in action.items() if k not in ("at_ms",)}
        if ct1_cn is None:
            failures.append(f"{action['cmd']}: no commander authority in scenario")
            return
        res = built[ct1_cn].ct1_command(cmd)
        collector.sink(ct1_cn, "CmdIssued", engine.now_ms(),
                       {"cmd": action["cmd"], "cid": res.get("cid"),
                        "ok": res["ok"]})
        if not res["ok"]:
            failures.append(f"{action['cmd']}: {res['error']}")

    for action in doc.get("actions", []):
        at_us = t0_us + action["at_ms"] * 1000
        if action["cmd"] == "CommandStream":
            engine.at(at_us, lambda a=action: _Stream(
                engine, built[a["from"]], a["to"], a.get("rate_hz", 1.0),
                a.get("payload_bytes", 24),
                t0_us + int(a.get("until_ms", doc["duration_ms"])) * 1000))
        else:
            engine.at(at_us, lambda a=action: issue(a))

    engine.run_for_ms(doc["duration_ms"])

    result = RunResult(
        index=index, seed=run_seed, collector=collector,
        runtime_stats={cn: (n.runtime.jobs, n.runtime.busy_us,
                            n.runtime.waited_us, n.rx_jobs, n.rx_busy_us)
                       for cn, n in sorted(built.items())},
        adversaries=[p.adversary for link in net.links
                     for p in (link.forward, link.reverse)
                     if p.adversary is not None])
    if failures:
        raise ScenarioFailure(
            f"run {index}: " + "; ".join(failures),
            metrics.trace_lines(collector.records, run=index))
    return result


def run_scenario(doc: dict, seed: int | None = None,
                 runs: int | None = None) -> ScenarioResult:
    validate_scenario(doc, where=doc.get("name", "scenario")
                      if isinstance(doc, dict) else "scenario")
    base_seed = doc["seed"] if seed is None else seed
    n_runs = doc.get("runs", DEFAULT_RUNS) if runs is None else runs

    identities = _scenario_identities(doc)
    mission = artifacts.generate_mission(identities, policy.default_policy_doc(),
                                         seed=base_seed)

    results: list[RunResult] = []
    for i in range(n_runs):
        results.append(_run_once(doc, mission, i,
                                 crypto.sub_seed(base_seed, f"run:{i}")))

    summaries, derived = _evaluate(doc, identities, results)
    check_failures = _run_checks(doc.get("checks", []), summaries, derived)
    return ScenarioResult(doc["name"], base_seed, results, summaries, derived,
                          check_failures)


# --- metric evaluation ------------------------------------------------------


def _per_run(results: list[RunResult], fn: Callable[[RunResult], float],
             label: str) -> list[float]:
    values = []
    for run in results:
        try:
            values.append(fn(run))
        except metrics.MetricError as exc:
            raise ScenarioFailure(
                f"run {run.index}, metric {label}: {exc}",
                metrics.trace_lines(run.records, run=run.index))
    return values


def _evaluate(doc: dict, identities: list[NodeIdentity],
              results: list[RunResult]) -> tuple[list, dict]:
    ips = {ident.common_name: ident.ip_address for ident in identities}
    epoch = artifacts.DETERMINISTIC_EPOCH_MS
    summaries: list[metrics.ExperimentSummary] = []
    derived: dict = {}

    for spec in doc.get("metrics", []):
        name = spec["name"]
        if name == "connection":
            client, server = spec["client"], spec["server"]
            sid = f"connection_ms:{client}-{server}"
            values = _per_run(results, lambda r: metrics.connection_time_ms(
                r.records, client, server), sid)
            summaries.append(metrics.ExperimentSummary.of(sid, values))

        elif name == "chain_connection":
            pairs = [tuple(p) for p in spec["pairs"]]
            sid = "chain_connection_ms"
            values = _per_run(results, lambda r: metrics.chain_connection_ms(
                r.records, pairs), sid)
            summaries.append(metrics.ExperimentSummary.of(sid, values))

        elif name == "renewal":
            client, server = spec["client"], spec["server"]
            suffix = f"{client}-{server}"
            triples = _per_run_dicts(
                results, lambda r: metrics.renewal_times_ms(r.records, client,
                                                            server),
                f"renewal:{suffix}")
            for key, sid in (("request_delay", f"renewal_request_delay_ms:{suffix}"),
                             ("client", f"renewal_client_ms:{suffix}"),
                             ("server", f"renewal_server_ms:{suffix}")):
                summaries.append(metrics.ExperimentSummary.of(
                    sid, [t[key] for t in triples]))

        elif name == "handover":
            method = spec["method"]
            parts = _per_run_dicts(
                results, lambda r: metrics.handover_times_ms(
                    r.records, method, spec["predecessor"], spec["successor"],
                    spec["uxv"]),
                f"handover:{method}")
            comp_keys = (("revocation", "connection")
                         if method == "Revocation"
                         else ("relinquish", "assume"))
            comp_sums = []
            for key in comp_keys:
                s = metrics.ExperimentSummary.of(f"handover_{key}_ms",
                                                 [p[key] for p in parts])
                comp_sums.append(s)
                summaries.append(s)
            total = metrics.ExperimentSummary.of("handover_total_ms",
                                                 [p["total"] for p in parts])
            summaries.append(total)
            lower, upper = metrics.handover_bounds(comp_sums[0].mean,
                                                   comp_sums[1].mean)
            derived[f"handover:{method}"] = {
                "lower_ms": lower, "upper_ms": upper,
                "measured_mean_ms": total.mean,
                "contained": lower <= total.mean <= upper,
            }

        elif name == "goodput":
            src, dst = spec["src"], spec["dst"]
            lo, hi = spec["window_ms"]
            window = (epoch + lo, epoch + hi)
            msg_type = spec.get("msg_type", wire.DATA)
            suffix = f"{src}->{dst}"
            stats = [metrics.direction_stats(
                r.records, src, dst, window, msg_type=msg_type)
                for r in results]
            summaries.append(metrics.ExperimentSummary.of(
                f"goodput_bps:{suffix}", [s.goodput_bps for s in stats]))
            summaries.append(metrics.ExperimentSummary.of(
                f"offered_bps:{suffix}", [s.offered_bps for s in stats]))
            summaries.append(metrics.ExperimentSummary.of(
                f"loss_pct:{suffix}", [100.0 * s.loss_fraction for s in stats]))
            # accounting closes over every message type on the pair: link
            # drops cannot be attributed to one type
            totals = [metrics.direction_stats(
                r.records, src, dst, window, msg_type=None,
                link_records=r.link_records, src_ip=ips[src], dst_ip=ips[dst])
                for r in results]
            backpressure = [
                len([rec for rec in metrics.select(
                    r.records, "MsgDropped", node=src, peer=dst,
                    reason="Backpressure")
                    if window[0] <= rec.t < window[1]])
                for r in results]
            derived[f"accounting:{suffix}"] = {
                "closed_runs": sum(1 for s in totals if s.accounting_closes),
                "runs": len(totals),
                "sent": [s.sent_count for s in totals],
                "received": [s.recv_count for s in totals],
                "rejected": [s.reject_count for s in totals],
                "link_dropped": [s.link_drop_count for s in totals],
                "sender_dropped": backpressure,
            }

        elif name == "cpu":
            per_run = [metrics.cpu_stats(r.runtime_stats) for r in results]
            for cn in sorted(per_run[0]):
                summaries.append(metrics.ExperimentSummary.of(
                    f"cpu_busy_ms:{cn}",
                    [stats[cn]["mean_busy_ms"] for stats in per_run]))
                summaries.append(metrics.ExperimentSummary.of(
                    f"cpu_rx_ms:{cn}",
                    [stats[cn]["mean_rx_ms"] for stats in per_run]))
            derived["cpu"] = {
                cn: {"jobs": [stats[cn]["jobs"] for stats in per_run],
                     "rx_jobs": [stats[cn]["rx_jobs"] for stats in per_run],
                     "mean_wait_ms": [stats[cn]["mean_wait_ms"]
                                      for stats in per_run]}
                for cn in sorted(per_run[0])}

    return summaries, derived


def _per_run_dicts(results, fn, label) -> list[dict]:
    out = []
    for run in results:
        try:
            out.append(fn(run))
        except metrics.MetricError as exc:
            raise ScenarioFailure(
                f"run {run.index}, metric {label}: {exc}",
                metrics.trace_lines(run.records, run=run.index))
    return out


def _run_checks(checks: list, summaries: list, derived: dict) -> list[str]:
    by_id = {s.metric: s for s in summaries}
    failures = []
    for check in checks:
        if "metric" in check:
            sid = check["metric"]
            s = by_id.get(sid)
            if s is None:
                failures.append(f"check on {sid}: metric was not collected")
                continue
            if "mean_between" in check:
                lo, hi = check["mean_between"]
                if not lo <= s.mean <= hi:
                    failures.append(
                        f"{sid}: mean {s.mean:.3f} outside [{lo}, {hi}]")
            if "mean_at_most" in check and s.mean > check["mean_at_most"]:
                failures.append(
                    f"{sid}: mean {s.mean:.3f} > {check['mean_at_most']}")
            if "mean_at_least" in check and s.mean < check["mean_at_least"]:
                failures.append(
                    f"{sid}: mean {s.mean:.3f} < {check['mean_at_least']}")
        else:
            key = check["derived"]
            entry = derived.get(key)
            if entry is None:
                failures.append(f"check on {key}: not derived")
                continue
            if check.get("contained") and not entry.get("contained"):
                failures.append(
                    f"{key}: measured {entry['measured_mean_ms']:.3f} outside "
                    f"[{entry['lower_ms']:.3f}, {entry['upper_ms']:.3f}]")
            if check.get("closed") and entry["closed_runs"] != entry["runs"]:
                failures.append(
                    f"{key}: accounting closed in {entry['closed_runs']}"
                    f"/{entry['runs']} runs")
    return failures
