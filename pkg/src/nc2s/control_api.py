"""Local operator surface: one TCP port, commands in, events out.

A single listener serves three client kinds, sniffed from the first bytes:
newline-delimited JSON over a raw socket (scripts, tests), the same
documents over a WebSocket (the browser console), and plain HTTP GET for
the console's static assets. Command documents carry ``{"cmd": ...}`` plus
the command's fields and an optional ``ref`` echoed back in the
acknowledgment; everything the server pushes is one JSON object with an
``event`` key per line or text frame.

Attached to a commander node the full command set is accepted; on any
other role the server is read only and refuses every verb except
``Snapshot``, so a relay commander's console shows the picture without
the buttons. Per-datagram events are folded into periodic ``Stats``
summaries instead of being streamed raw.

The server speaks through the host's stream interface, so it runs
unchanged over kernel sockets in live mode and inside the virtual network
under test.
"""

from __future__ import annotations

import base64
import hashlib
import json
import mimetypes
import struct
import urllib.parse
from pathlib import Path

_WS_GUID = b"258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA

# Per-datagram events aggregated into Stats broadcasts.
FOLDED_EVENTS = {"MsgSent", "MsgRecv", "MsgDropped"}

DEFAULT_STATS_INTERVAL_MS = 1000
_MAX_LINE = 1 << 16
_MAX_FRAME = 1 << 20

_PLACEHOLDER_HTML = b"""<!doctype html>
<meta charset="utf-8"><title>nc2s control</title>
<style>body{font:13px/1.5 monospace;margin:1rem}</style>
<h3>nc2s control feed</h3>
<p>No console bundle is installed; raw event feed below.</p>
<pre id="log"></pre>
<script>
const log = document.getElementById("log");
const ws = new WebSocket("ws://" + location.host + "/ws");
ws.onopen = () => ws.send(JSON.stringify({cmd: "Snapshot"}));
ws.onmessage = (e) => { log.textContent += e.data + "\\n"; };
ws.onclose = () => { log.textContent += "(feed closed)\\n"; };
</script>
"""


def jsonable(value):
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, (list, tuple, set, frozenset)):
        return [jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    return str(value)


def ws_accept_key(key: str) -> str:
    digest = hashlib.sha1(key.strip().encode() + _WS_GUID).digest()
    return base64.b64encode(digest).decode()


def ws_frame(opcode: int, payload: bytes) -> bytes:
    """Server-to-client frame: FIN set, unmasked."""
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


def ws_parse(buf: bytes) -> tuple[int, bytes, int] | None:
    """Decode one client frame: (opcode, payload, bytes consumed).

    Returns None when the buffer holds no complete frame yet; raises
    ValueError on violations (unmasked or fragmented frames, oversize).
    """
    if len(buf) < 2:
        return None
    b0, b1 = buf[0], buf[1]
    if not b0 & 0x80 or b0 & 0x0F == OP_CONT:
        raise ValueError("fragmented frames not supported")
    opcode = b0 & 0x0F
    if not b1 & 0x80:
        raise ValueError("client frames must be masked")
    n = b1 & 0x7F
    off = 2
    if n == 126:
        if len(buf) < 4:
            return None
        n = struct.unpack_from(">H", buf, 2)[0]
        off = 4
    elif n == 127:
        if len(buf) < 10:
            return None
        n = struct.unpack_from(">Q", buf, 2)[0]
        off = 10
    if n > _MAX_FRAME:
        raise ValueError("frame too large")
    if len(buf) < off + 4 + n:
        return None
    mask = buf[off:off + 4]
    off += 4
    payload = bytes(b ^ mask[i & 3] for i, b in enumerate(buf[off:off + n]))
    return opcode, payload, off + n


def _http_response(status: str, body: bytes,
                   content_type: str = "text/plain; charset=utf-8",
                   extra: tuple[str, ...] = ()) -> bytes:
    lines = [f"HTTP/1.1 {status}",
             f"Content-Type: {content_type}",
             f"Content-Length: {len(body)}",
             "Connection: close",
             *extra, "", ""]
    return "\r\n".join(lines).encode() + body


class ControlServer:
    """Command and event endpoint for one node runtime.

    ``host`` supplies ``listen_stream``; events enter through ``sink``,
    which has the node event-sink signature and can tee to ``forward``.
    ``read_only`` defaults to whether the node lacks the command surface.
    """

    def __init__(self, engine, node, host, *, port: int = 0,
                 read_only: bool | None = None, assets_dir=None,
                 stats_interval_ms: int = DEFAULT_STATS_INTERVAL_MS,
                 forward=None):
        self.engine = engine
        self.node = node
        self.read_only = (not hasattr(node, "ct1_command")
                          if read_only is None else read_only)
        self.assets_root = Path(assets_dir).resolve() if assets_dir else None
        self.forward = forward
        self.stats_interval_ms = stats_interval_ms
        self._clients: list[_Client] = []
        self._traffic: dict[str, dict[str, int]] = {}
        self._closed = False
        self._listener = host.listen_stream(port, self._accept)
        self.port = self._listener.port
        self._stats_timer = None
        if stats_interval_ms > 0:
            self._stats_timer = engine.after_ms(stats_interval_ms,
                                                self._stats_tick)

    # event intake

    def sink(self, node: str, name: str, t, fields: dict) -> None:
        if self.forward is not None:
            self.forward(node, name, t, fields)
        if self._closed:
            return
        if name in FOLDED_EVENTS:
            row = self._traffic.setdefault(str(fields.get("peer", "")), {
                "sent": 0, "sent_bytes": 0, "recv": 0, "recv_bytes": 0,
                "dropped": 0})
            size = int(fields.get("bytes", 0) or 0)
            if name == "MsgSent":
                row["sent"] += 1
                row["sent_bytes"] += size
            elif name == "MsgRecv":
                row["recv"] += 1
                row["recv_bytes"] += size
            else:
                row["dropped"] += 1
            return
        doc = {"event": name, "node": node, "t": int(t)}
        for k, v in fields.items():
            if k not in doc:
                doc[k] = jsonable(v)
        if name == "MapUpdated":
            doc["map"] = self._map_entries()
        self._broadcast(doc)

    def _stats_tick(self) -> None:
        if self._closed:
            return
        self._stats_timer = self.engine.after_ms(self.stats_interval_ms,
                                                 self._stats_tick)
        traffic = [{"peer": peer, **row}
                   for peer, row in sorted(self._traffic.items())]
        self._traffic.clear()
        if not self._clients:
            return
        self._broadcast({"event": "Stats", "t": self.engine.now_ms(),
                         "interval_ms": self.stats_interval_ms,
                         "traffic": traffic})

    # command handling

    def snapshot(self) -> dict:
        sessions = []
        for sess in self.node.sessions.values():
            st = sess.state
            sessions.append({"peer": st.peer.common_name,
                             "client": st.is_client,
                             "phase": st.phase.value,
                             "link_type": st.link_type,
                             "capacity_bps": st.capacity_bps,
                             "established_ms": st.established_ms,
                             "last_seen_ms": st.last_seen_ms})
        return {"event": "Snapshot", "node": self.node.cn,
                "role": self.node.role.value, "read_only": self.read_only,
                "t": self.engine.now_ms(), "map": self._map_entries(),
                "sessions": sorted(sessions, key=lambda s: s["peer"])}

    def _map_entries(self) -> list[dict]:
        entries = getattr(self.node, "network_map", None) or {}
        return [{"uxv": e.uxv_cn, "gcs": e.gcs_cn,
                 "last_seen_ms": e.last_seen_ms}
                for _, e in sorted(entries.items())]

    def _handle_doc(self, client: "_Client", doc) -> None:
        if not isinstance(doc, dict):
            client.push({"event": "Error", "error": "expected a JSON object"})
            return
        ref = doc.get("ref")
        kind = doc.get("cmd")
        if not isinstance(kind, str):
            client.push({"event": "Error", "ref": jsonable(ref),
                         "error": "missing 'cmd'"})
            return
        if kind == "Snapshot":
            snap = self.snapshot()
            snap["ref"] = jsonable(ref)
            client.push(snap)
            return
        if self.read_only:
            client.push({"event": "CmdAck", "ref": jsonable(ref),
                         "ok": False, "cid": None,
                         "error": f"read-only endpoint refuses {kind!r}"})
            return
        body = {k: v for k, v in doc.items() if k != "ref"}
        result = self.node.ct1_command(body)
        client.push({"event": "CmdAck", "ref": jsonable(ref), **result})

    # plumbing

    def _accept(self, conn) -> None:
        self._clients.append(_Client(self, conn))

    def _drop(self, client: "_Client") -> None:
        if client in self._clients:
            self._clients.remove(client)

    def _broadcast(self, doc: dict) -> None:
        for client in list(self._clients):
            if client.streaming:
                client.push(doc)

    def close(self) -> None:
        self._closed = True
        if self._stats_timer is not None:
            self._stats_timer.cancel()
        self._listener.close()
        for client in list(self._clients):
            client.conn.close()
        self._clients.clear()


class _Client:
    """One accepted connection; mode is sniffed from the first line."""

    def __init__(self, server: ControlServer, conn):
        self.server = server
        self.conn = conn
        self.mode: str | None = None
        self.streaming = False
        self.buf = b""
        conn.on_data = self._on_data
        conn.on_close = self._on_close

    def push(self, doc: dict) -> None:
        if self.conn.state == "closed":
            return
        line = json.dumps(doc, separators=(",", ":"), default=str)
        if self.mode == "ws":
            self.conn.send(ws_frame(OP_TEXT, line.encode()))
        else:
            self.conn.send(line.encode() + b"\n")

    def _on_close(self, conn, reason: str) -> None:
        self.server._drop(self)

    def _on_data(self, data: bytes) -> None:
        self.buf += data
        try:
            self._pump()
        except ValueError:
            self.conn.close()
            self.server._drop(self)

    def _pump(self) -> None:
        while self.conn.state != "closed":
            before = (self.mode, len(self.buf))
            if self.mode is None:
                self._sniff()
            if self.mode == "ndjson":
                self._pump_lines()
            elif self.mode == "http":
                self._pump_http()
            elif self.mode == "ws":
                self._pump_ws()
            if (self.mode, len(self.buf)) == before:
                return

    def _sniff(self) -> None:
        if b"\n" not in self.buf:
            if len(self.buf) > _MAX_LINE:
                raise ValueError("first line too long")
            return
        first = self.buf.split(b"\n", 1)[0]
        verb = first.split(b" ", 1)[0].upper()
        if verb in (b"GET", b"HEAD", b"POST", b"PUT", b"DELETE", b"OPTIONS"):
            self.mode = "http"
        else:
            self.mode = "ndjson"
            self.streaming = True

    def _pump_lines(self) -> None:
        while b"\n" in self.buf:
            line, self.buf = self.buf.split(b"\n", 1)
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                self.push({"event": "Error", "error": f"bad JSON: {exc}"})
                continue
            self.server._handle_doc(self, doc)
        if len(self.buf) > _MAX_LINE:
            raise ValueError("line too long")

    # http / websocket

    def _pump_http(self) -> None:
        end = self.buf.find(b"\r\n\r\n")
        if end < 0:
            if len(self.buf) > _MAX_FRAME:
                raise ValueError("headers too long")
            return
        head, self.buf = self.buf[:end], self.buf[end + 4:]
        lines = head.decode("latin-1").split("\r\n")
        parts = lines[0].split(" ")
        if len(parts) < 2:
            raise ValueError("bad request line")
        method, target = parts[0].upper(), parts[1]
        headers = {}
        for line in lines[1:]:
            if ":" in line:
                k, v = line.split(":", 1)
                headers[k.strip().lower()] = v.strip()
        if (headers.get("upgrade", "").lower() == "websocket"
                and "sec-websocket-key" in headers):
            accept = ws_accept_key(headers["sec-websocket-key"])
            self.conn.send(("HTTP/1.1 101 Switching Protocols\r\n"
                            "Upgrade: websocket\r\n"
                            "Connection: Upgrade\r\n"
                            f"Sec-WebSocket-Accept: {accept}\r\n"
                            "\r\n").encode())
            self.mode = "ws"
            self.streaming = True
            return
        self._serve_static(method, target)
        self.mode = "done"
        self.buf = b""
        self.conn.close()

    def _serve_static(self, method: str, target: str) -> None:
        if method not in ("GET", "HEAD"):
            self.conn.send(_http_response("405 Method Not Allowed",
                                          b"method not allowed\n"))
            return
        path = urllib.parse.unquote(target.split("?", 1)[0].split("#", 1)[0])
        if path.endswith("/"):
            path += "index.html"
        root = self.server.assets_root
        body = None
        content_type = "text/html; charset=utf-8"
        if root is None:
            if path == "/index.html":
                body = _PLACEHOLDER_HTML
        else:
            candidate = (root / path.lstrip("/")).resolve()
            if candidate.is_relative_to(root) and candidate.is_file():
                body = candidate.read_bytes()
                content_type = (mimetypes.guess_type(candidate.name)[0]
                                or "application/octet-stream")
        if body is None:
            self.conn.send(_http_response("404 Not Found", b"not found\n"))
            return
        head = ("HTTP/1.1 200 OK\r\n"
                f"Content-Type: {content_type}\r\n"
                f"Content-Length: {len(body)}\r\n"
                "Connection: close\r\n\r\n").encode()
        self.conn.send(head if method == "HEAD" else head + body)

    def _pump_ws(self) -> None:
        while True:
            frame = ws_parse(self.buf)
            if frame is None:
                return
            opcode, payload, consumed = frame
            self.buf = self.buf[consumed:]
            if opcode in (OP_TEXT, OP_BINARY):
                try:
                    doc = json.loads(payload)
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    self.push({"event": "Error", "error": f"bad JSON: {exc}"})
                    continue
                self.server._handle_doc(self, doc)
            elif opcode == OP_PING:
                self.conn.send(ws_frame(OP_PONG, payload))
            elif opcode == OP_CLOSE:
                self.conn.send(ws_frame(OP_CLOSE, payload[:2]))
                self.conn.close()
                self.server._drop(self)
                return
            elif opcode != OP_PONG:
                raise ValueError(f"unsupported opcode {opcode}")
