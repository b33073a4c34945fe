"""Operator entry points.

``nc2s ca`` is the offline authority tool (files in, files out, no
network). ``nc2s mission init`` imprints per-node configuration bundles.
``nc2s run`` launches one role live on kernel sockets with a local
control endpoint. ``nc2s scenario`` loads and executes virtual-time
experiment files; ``nc2s report`` renders their summaries side by side.
``nc2s demo`` runs a complete mission on loopback for console work.

Exit codes: 0 success, 1 scenario assertion failure, 2 usage error.
"""

from __future__ import annotations

import json
import os
import signal
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import click

from . import artifacts, control_api, crypto, metrics, nodes, policy
from . import runtime, scenario
from .artifacts import NodeIdentity, Role

DEFAULT_API_PORT = 8788
_CA_FILES = ("ca_key.pem", "ca_cert.pem")


@click.group()
@click.version_option(package_name="nc2s")
def main() -> None:
    """Secure command and control for unmanned vehicles."""


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _refuse_overwrite(targets: list[Path], force: bool) -> None:
    existing = [str(t) for t in targets if t.exists()]
    if existing and not force:
        _fail(f"refusing to overwrite {existing[0]} (pass --force)", 2)


def _load_ca(ca_dir: Path):
    key = crypto.key_from_pem((ca_dir / "ca_key.pem").read_bytes())
    cert = artifacts.Certificate.from_pem((ca_dir / "ca_cert.pem").read_bytes())
    return key, cert


# ---------------------------------------------------------------------------
# offline certificate authority


@main.group()
def ca() -> None:
    """Offline authority: operates on local files only, never listens."""


@ca.command("init")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--name", default="MISSION-CA", show_default=True)
@click.option("--ip", default="10.10.0.250", show_default=True)
@click.option("--lifetime-days", default=365, show_default=True)
@click.option("--seed", type=int, default=None,
              help="Derive the key from this seed instead of the system RNG.")
@click.option("--force", is_flag=True)
def ca_init(out: Path, name: str, ip: str, lifetime_days: int,
            seed: int | None, force: bool) -> None:
    """Create a root: private key plus self-signed certificate."""
    _refuse_overwrite([out / f for f in _CA_FILES], force)
    key = crypto.generate_key(None if seed is None else f"{seed}:ca".encode())
    now = int(time.time() * 1000)
    validity = (now - artifacts.HOUR_MS,
                now + lifetime_days * artifacts.DAY_MS)
    try:
        cert = artifacts.make_ca_certificate(
            key, NodeIdentity(name, ip, Role.CA), validity)
    except ValueError as exc:
        _fail(str(exc), 2)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ca_key.pem").write_bytes(crypto.key_to_pem(key))
    (out / "ca_cert.pem").write_bytes(cert.to_pem())
    click.echo(f"root {name!r} written to {out}")


@ca.command("issue")
@click.option("--ca", "ca_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--cn", required=True)
@click.option("--ip", required=True)
@click.option("--role", required=True,
              type=click.Choice([r.value for r in Role if r is not Role.CA]))
@click.option("--serial", type=int, required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True)
def ca_issue(ca_dir: Path, cn: str, ip: str, role: str, serial: int,
             out: Path, seed: int | None, force: bool) -> None:
    """Issue a node key pair and certificate under an existing root."""
    _refuse_overwrite([out / "node_key.pem", out / "node_cert.pem"], force)
    ca_key, ca_cert = _load_ca(ca_dir)
    key = crypto.generate_key(
        None if seed is None else f"{seed}:key:{cn}".encode())
    try:
        cert = artifacts.issue_certificate(
            ca_key, ca_cert, NodeIdentity(cn, ip, Role(role)),
            key.public_key(),
            (ca_cert.not_before_ms, ca_cert.not_after_ms), serial)
    except ValueError as exc:
        _fail(str(exc), 2)
    out.mkdir(parents=True, exist_ok=True)
    (out / "node_key.pem").write_bytes(crypto.key_to_pem(key))
    (out / "node_cert.pem").write_bytes(cert.to_pem())
    click.echo(f"serial {serial} issued to {cn} ({role}) in {out}")


@ca.command("revoke")
@click.option("--ca", "ca_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--serial", "serials", type=int, multiple=True, required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--lifetime-days", default=7, show_default=True)
def ca_revoke(ca_dir: Path, serials: tuple[int, ...], out: Path,
              lifetime_days: int) -> None:
    """Sign a certificate revocation list naming the given serials."""
    ca_key, _ = _load_ca(ca_dir)
    now = int(time.time() * 1000)
    rl = artifacts.build_certrl(
        ca_key, list(serials),
        (now - artifacts.HOUR_MS, now + lifetime_days * artifacts.DAY_MS))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(rl.to_bytes())
    click.echo(f"revocation list for serials "
               f"{sorted(set(serials))} written to {out}")


# ---------------------------------------------------------------------------
# mission imprinting


def _load_identities(nodes_file: Path | None) -> list[NodeIdentity]:
    if nodes_file is None:
        return artifacts.default_node_list()
    doc = json.loads(nodes_file.read_text())
    if not isinstance(doc, list):
        raise ValueError("node file must hold a JSON list")
    out = []
    for i, entry in enumerate(doc):
        try:
            out.append(NodeIdentity(entry["cn"], entry["ip"],
                                    Role(entry["role"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"node entry {i}: {exc}") from exc
    return out


@main.group()
def mission() -> None:
    """Mission imprinting: one configuration bundle per node."""


@mission.command("init")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--nodes", "nodes_file", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="JSON list of {cn, ip, role}; default is the four-node "
                   "reference topology.")
@click.option("--policy", "policy_file", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--deterministic", is_flag=True,
              help="Derive every key from the seed and pin the epoch: the "
                   "same inputs give identical serials and keys.")
@click.option("--local", is_flag=True,
              help="Rewrite node addresses onto loopback so all roles can "
                   "run on this machine.")
@click.option("--force", is_flag=True)
def mission_init(out: Path, nodes_file: Path | None, policy_file: Path | None,
                 seed: int, deterministic: bool, local: bool,
                 force: bool) -> None:
    """Generate bundles: keys, certificates, revocation lists, policy."""
    try:
        identities = _load_identities(nodes_file)
    except (ValueError, json.JSONDecodeError) as exc:
        _fail(f"{nodes_file}: {exc}", 2)
    if local:
        identities = [replace(ident, ip_address=f"127.0.1.{i + 1}")
                      for i, ident in enumerate(identities)]
    policy_doc = (json.loads(policy_file.read_text()) if policy_file
                  else policy.default_policy_doc())
    epoch = (artifacts.DETERMINISTIC_EPOCH_MS if deterministic
             else int(time.time() * 1000))
    try:
        generated = artifacts.generate_mission(
            identities, policy_doc,
            seed=seed if deterministic else None, epoch_ms=epoch)
    except ValueError as exc:
        _fail(str(exc), 2)
    _refuse_overwrite([out / cn for cn in generated.bundles]
                      + [out / "ca", out / "mission.json"], force)
    for cn, bundle in generated.bundles.items():
        verdict = bundle.self_check()
        if not verdict:
            _fail(f"bundle {cn} failed self-check: {verdict.reason}", 2)
        artifacts.write_bundle(out / cn, bundle)
    ca_dir = out / "ca"
    ca_dir.mkdir(parents=True, exist_ok=True)
    (ca_dir / "ca_key.pem").write_bytes(crypto.key_to_pem(generated.ca_key))
    (ca_dir / "ca_cert.pem").write_bytes(generated.ca_cert.to_pem())
    manifest = {
        "epoch_ms": epoch,
        "deterministic": deterministic,
        "local": local,
        "nodes": [{"cn": b.identity.common_name,
                   "ip": b.identity.ip_address,
                   "role": b.identity.role.value,
                   "tls_port": b.server_port,
                   "udp_port": b.udp_port}
                  for b in generated.bundles.values()],
    }
    (out / "mission.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    click.echo(f"mission written to {out}: "
               + ", ".join(generated.bundles))


# ---------------------------------------------------------------------------
# live node


def _console_assets() -> Path | None:
    packaged = Path(str(resources.files("nc2s"))) / "console_assets"
    return packaged if (packaged / "index.html").is_file() else None


def _event_printer(quiet: bool):
    def printer(node: str, name: str, t, fields: dict) -> None:
        if quiet or name in control_api.FOLDED_EVENTS:
            return
        doc = {"event": name, "node": node, "t": int(t)}
        for k, v in fields.items():
            if k not in doc:
                doc[k] = control_api.jsonable(v)
        click.echo(json.dumps(doc, separators=(",", ":"), default=str))
    return printer


@main.command("run")
@click.option("--role", required=True,
              type=click.Choice(["ct1", "ct2", "gcs", "uxv"]))
@click.option("--bundle", "bundle_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--ca", "ca_dir", default=None,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Root directory; lets a commander sign certificate "
                   "revocations.")
@click.option("--api-port", type=int, default=DEFAULT_API_PORT,
              show_default=True)
@click.option("--api-host", default="127.0.0.1", show_default=True)
@click.option("--no-api", is_flag=True)
@click.option("--serve-console", is_flag=True,
              help="Serve the browser console's assets on the control port.")
@click.option("--assets", "assets_dir", default=None,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--quiet", is_flag=True)
def run_node(role: str, bundle_dir: Path, ca_dir: Path | None, api_port: int,
             api_host: str, no_api: bool, serve_console: bool,
             assets_dir: Path | None, quiet: bool) -> None:
    """Run one node live: kernel sockets, wall clock."""
    try:
        bundle = artifacts.load_bundle(bundle_dir)
    except (OSError, ValueError, KeyError) as exc:
        _fail(f"cannot load bundle {bundle_dir}: {exc}", 2)
    if bundle.identity.role.value != role:
        _fail(f"bundle {bundle_dir} holds role "
              f"{bundle.identity.role.value!r}, not {role!r}", 2)

    engine = runtime.LiveEngine()
    host = runtime.LiveHost(engine, bundle.identity.ip_address)
    api: control_api.ControlServer | None = None
    printer = _event_printer(quiet)

    def tee(node_cn: str, name: str, t, fields: dict) -> None:
        printer(node_cn, name, t, fields)
        if api is not None:
            api.sink(node_cn, name, t, fields)

    kw = {}
    if ca_dir is not None and role == "ct1":
        ca_key, _ = _load_ca(ca_dir)
        kw["ca_signer"] = (lambda serials, validity:
                           artifacts.build_certrl(ca_key, serials, validity))
    node = nodes.make_node(bundle, host, engine,
                           seed=int.from_bytes(os.urandom(4), "big"),
                           event_sink=tee, **kw)
    if not no_api:
        assets = assets_dir or (_console_assets() if serve_console else None)
        api = control_api.ControlServer(
            engine, node, runtime.LiveHost(engine, api_host),
            port=api_port, assets_dir=assets)
    node.start()
    banner = (f"{bundle.identity.common_name} ({role}) up: "
              f"udp {bundle.identity.ip_address}:{bundle.udp_port}, "
              f"tls :{bundle.server_port}")
    if api is not None:
        banner += f", control http://{api_host}:{api.port}/"
    click.echo(banner)
    signal.signal(signal.SIGINT, lambda *_: engine.stop())
    signal.signal(signal.SIGTERM, lambda *_: engine.stop())
    engine.run()
    engine.close()


# ---------------------------------------------------------------------------
# scenarios and reports


def _shipped_scenarios() -> dict[str, Path]:
    base = Path(str(resources.files("nc2s"))) / "scenarios"
    return {p.stem: p for p in sorted(base.glob("*.json"))}


@main.group(name="scenario")
def scenario_group() -> None:
    """Virtual-time experiments: deterministic, seeded, checked."""


@scenario_group.command("list")
def scenario_list() -> None:
    """Name every shipped scenario."""
    for name, path in _shipped_scenarios().items():
        doc = json.loads(path.read_text())
        click.echo(f"{name:32s} {doc['duration_ms']:>7d} ms x "
                   f"{doc.get('runs', 1)} runs")


@scenario_group.command("run")
@click.argument("spec")
@click.option("--seed", type=int, default=None,
              help="Override the file's base seed.")
@click.option("--runs", type=int, default=None,
              help="Override the file's run count.")
@click.option("--out", "out_dir", default=None,
              type=click.Path(path_type=Path),
              help="Write trace.jsonl, summary.json, summary.csv here.")
@click.option("--quiet", is_flag=True)
def scenario_run(spec: str, seed: int | None, runs: int | None,
                 out_dir: Path | None, quiet: bool) -> None:
    """Execute one scenario: a file path or a shipped scenario name."""
    path = Path(spec)
    if not path.exists():
        shipped = _shipped_scenarios().get(spec)
        if shipped is None:
            _fail(f"no such file or shipped scenario: {spec}", 2)
        path = shipped
    try:
        doc = scenario.load_scenario(path)
    except scenario.SchemaError as exc:
        _fail(str(exc), 2)
    try:
        result = scenario.run_scenario(doc, seed=seed, runs=runs)
    except scenario.ScenarioFailure as exc:
        click.echo(f"error: {exc}", err=True)
        for line in exc.trace[-10:]:
            click.echo(f"  {line}", err=True)
        sys.exit(1)
    if not quiet:
        click.echo(metrics.format_summary_table(
            [(result.name, [s.as_dict() for s in result.summaries])]))
        for key, value in sorted(result.derived.items()):
            click.echo(f"derived {key}: "
                       + json.dumps(value, default=str, sort_keys=True))
    if out_dir is not None:
        written = result.write(out_dir)
        click.echo("wrote " + ", ".join(str(p) for p in written))
    if result.check_failures:
        for failure in result.check_failures:
            click.echo(f"check failed: {failure}", err=True)
        sys.exit(1)
    if not quiet:
        click.echo(f"{result.name}: all checks passed "
                   f"({len(result.runs)} runs, seed {result.seed})")


@main.command("report")
@click.argument("paths", nargs=-1, required=True,
                type=click.Path(exists=True, path_type=Path))
def report(paths: tuple[Path, ...]) -> None:
    """Render summary.json files (or directories holding one) as a table."""
    named = []
    for path in paths:
        source = path / "summary.json" if path.is_dir() else path
        try:
            doc = json.loads(source.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            _fail(f"{source}: {exc}", 2)
        named.append((doc.get("scenario", source.stem),
                      doc.get("summaries", [])))
    click.echo(metrics.format_summary_table(named))


# ---------------------------------------------------------------------------
# loopback demo mission


@main.command("demo")
@click.option("--port", type=int, default=DEFAULT_API_PORT, show_default=True)
@click.option("--assets", "assets_dir", default=None,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--duration", type=float, default=None,
              help="Stop after this many seconds; default runs until "
                   "interrupted.")
@click.option("--quiet", is_flag=True)
def demo(port: int, assets_dir: Path | None, seed: int,
         duration: float | None, quiet: bool) -> None:
    """Run the reference mission on loopback with a live control feed."""
    identities = [replace(ident, ip_address=f"127.0.1.{i + 1}")
                  for i, ident in enumerate(artifacts.default_node_list())]
    generated = artifacts.generate_mission(identities,
                                           policy.default_policy_doc(),
                                           seed=seed,
                                           epoch_ms=int(time.time() * 1000))

    engine = runtime.LiveEngine()
    api: control_api.ControlServer | None = None
    printer = _event_printer(quiet)

    def tee(node_cn: str, name: str, t, fields: dict) -> None:
        printer(node_cn, name, t, fields)
        if api is not None:
            api.sink(node_cn, name, t, fields)

    def ca_signer(serials, validity):
        return artifacts.build_certrl(generated.ca_key, serials, validity)

    built: dict[str, nodes.Node] = {}
    ct1_cn = ""
    for cn, bundle in generated.bundles.items():
        host = runtime.LiveHost(engine, bundle.identity.ip_address)
        kw = {}
        if bundle.identity.role is Role.CT1:
            kw = {"ca_signer": ca_signer}
            ct1_cn = cn
        built[cn] = nodes.make_node(bundle, host, engine, seed=seed,
                                    event_sink=tee, **kw)
    commander = built[ct1_cn]
    api = control_api.ControlServer(
        engine, commander, runtime.LiveHost(engine, "127.0.0.1"),
        port=port, assets_dir=assets_dir or _console_assets())
    for node in built.values():
        node.start()

    def order(client: str, server: str):
        def fire():
            result = commander.ct1_command({"cmd": "NewConnection",
                                            "client": client,
                                            "server": server})
            if not result["ok"]:
                click.echo(f"order {client}->{server}: {result['error']}",
                           err=True)
        return fire

    engine.after_ms(300, order("TC1", "TC2"))
    engine.after_ms(2000, order("TC1", "GCS1"))
    engine.after_ms(4000, order("GCS1", "UXV1"))
    if duration is not None:
        engine.after_ms(int(duration * 1000), engine.stop)
    click.echo(f"demo mission up; control feed at http://127.0.0.1:{api.port}/")
    signal.signal(signal.SIGINT, lambda *_: engine.stop())
    signal.signal(signal.SIGTERM, lambda *_: engine.stop())
    engine.run()
    engine.close()


if __name__ == "__main__":
    main()
