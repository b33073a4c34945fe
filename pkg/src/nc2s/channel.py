"""Mutually authenticated, encrypted control channel over the reliable stream.

Shaped like a TLS 1.3 mutual-auth handshake but self-contained and fully
deterministic under seeded RNG: ephemeral ECDH hellos, HKDF record keys
salted with the transcript hash, AES-GCM records with counter nonces, then an
encrypted certificate exchange in which each side signs the transcript to
bind its certificate to this exact channel. A middleman who rewrites a hello
diverges the transcripts: record decryption breaks and, independently, the
transcript signatures cannot verify.

The channel carries typed records. It consumes the handshake and certificate
records itself and hands everything else (credential, clock sync, port
announcement) to the owner via on_record.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable

from . import crypto
from .artifacts import Certificate, Verdict

# outer frames on the byte stream
REC_HELLO = 0x01
REC_ENC = 0x02

# inner (encrypted) record types; CRED and later belong to the session layer
R_CERT = 0x0A
R_CERT_VERIFY = 0x0B
R_CRED = 0x0C
R_CRED_OK = 0x0D
R_NTP_REQ = 0x0E
R_NTP_RESP = 0x0F
R_PORT = 0x10
R_DONE = 0x11
R_ALERT = 0x12

_FRAME = struct.Struct("!BH")
_TRANSCRIPT_LABEL = b"nc2s-chan-v1"
AUTH_CLIENT = b"chan-auth-client"
AUTH_SERVER = b"chan-auth-server"

# compute charges (virtual CPU milliseconds)
COST_HANDSHAKE_MS = 25.0
COST_SIGN_MS = 15.0
COST_CERT_VERIFY_MS = 45.0

STEP_HANDSHAKE = 1
STEP_CERTIFICATE = 2


@dataclass(frozen=True)
class Failure:
    step: int
    reason: str


def _run_now(cost_ms: float, fn: Callable[[], None]) -> None:
    fn()


class SecureChannel:
    """One endpoint of the control channel, bound to a StreamConn."""

    def __init__(
        self,
        *,
        is_client: bool,
        rng,
        node_key,
        own_cert_der: bytes,
        verify_peer: Callable[[Certificate], Verdict],
        work: Callable[[float, Callable[[], None]], None] | None = None,
        schedule=None,
        handshake_timeout_ms: float = 20_000.0,
        on_ready: Callable[["SecureChannel"], None] | None = None,
        on_record: Callable[["SecureChannel", int, bytes], None] | None = None,
        on_fail: Callable[["SecureChannel", Failure], None] | None = None,
    ):
        self.is_client = is_client
        self.rng = rng
        self.node_key = node_key
        self.own_cert_der = own_cert_der
        self.verify_peer = verify_peer
        self.work = work or _run_now
        self.on_ready = on_ready
        self.on_record = on_record
        self.on_fail = on_fail
        self.conn = None
        self.peer_cert: Certificate | None = None
        self.ready = False
        self.failed: Failure | None = None
        self._buf = b""
        self._eph = crypto.generate_key(rng.randbytes(32))
        self._own_hello = rng.randbytes(32) + crypto.point_bytes(self._eph.public_key())
        self._transcript: bytes | None = None
        self._send_key: bytes | None = None
        self._recv_key: bytes | None = None
        self._send_seq = 0
        self._recv_seq = 0
        self._sent_cert = False
        self._timer = None
        if schedule is not None:
            self._timer = schedule(handshake_timeout_ms,
                                   lambda: self._fail(STEP_HANDSHAKE, "Timeout"))

    # wiring

    def bind(self, conn) -> None:
        self.conn = conn
        conn.on_data = self._on_bytes
        conn.on_close = self._on_conn_closed
        if self.is_client and conn.state == "open":
            self._send_hello()
        elif self.is_client:
            conn.on_open = lambda c: self._send_hello()

    def close(self) -> None:
        if self.conn is not None and self.conn.state != "closed":
            self.conn.close()

    # outbound

    def _frame_out(self, rtype: int, body: bytes) -> None:
        if self.conn is not None and self.conn.state != "closed":
            self.conn.send(_FRAME.pack(rtype, len(body)) + body)

    def _send_hello(self) -> None:
        self._frame_out(REC_HELLO, self._own_hello)

    def send_record(self, rtype: int, body: bytes) -> None:
        """Encrypt one inner record and ship it (owner API after ready)."""
        self.send_records([(rtype, body)])

    def send_records(self, records: list[tuple[int, bytes]]) -> None:
        if self._send_key is None or self.failed is not None:
            return
        plain = b"".join(_FRAME.pack(t, len(b)) + b for t, b in records)
        seq = self._send_seq
        self._send_seq += 1
        nonce = seq.to_bytes(12, "big")
        aad = b"nc2s-chan" + seq.to_bytes(8, "big")
        self._frame_out(REC_ENC, crypto.aead_seal(self._send_key, nonce, plain, aad))

    def alert(self, step: int, reason: str) -> None:
        self.send_records([(R_ALERT, bytes([step]) + reason.encode())])

    def abort(self, step: int, reason: str) -> None:
        """Owner-declared failure: alert the peer, close, report locally."""
        self._fail(step, reason)

    # inbound

    def _on_bytes(self, data: bytes) -> None:
        self._buf += data
        while self.failed is None:
            if len(self._buf) < _FRAME.size:
                return
            rtype, length = _FRAME.unpack_from(self._buf)
            if len(self._buf) < _FRAME.size + length:
                return
            body = self._buf[_FRAME.size:_FRAME.size + length]
            self._buf = self._buf[_FRAME.size + length:]
            self._on_frame(rtype, body)

    def _on_frame(self, rtype: int, body: bytes) -> None:
        if rtype == REC_HELLO:
            self._on_hello(body)
        elif rtype == REC_ENC:
            self._on_enc(body)
        # unknown outer frames are ignored

    def _on_hello(self, body: bytes) -> None:
        if self._transcript is not None or len(body) != 65:
            self._fail(STEP_HANDSHAKE, "BadHello")
            return

        def finish() -> None:
            if self.failed is not None:
                return
            hello_c, hello_s = ((self._own_hello, body) if self.is_client
                                else (body, self._own_hello))
            self._transcript = hashlib.sha256(
                _TRANSCRIPT_LABEL + hello_c + hello_s).digest()
            try:
                peer_pub = crypto.point_from_bytes(body[32:])
            except ValueError:
                self._fail(STEP_HANDSHAKE, "BadHello")
                return
            shared = crypto.ecdh(self._eph, peer_pub)
            c2s = crypto.hkdf_sha256(shared, salt=self._transcript, info=b"chan-c2s")
            s2c = crypto.hkdf_sha256(shared, salt=self._transcript, info=b"chan-s2c")
            self._send_key, self._recv_key = (c2s, s2c) if self.is_client else (s2c, c2s)
            if not self.is_client:
                self._send_hello()
            else:
                # client authenticates first
                self.work(COST_SIGN_MS, self._send_certificate)

        self.work(COST_HANDSHAKE_MS, finish)

    def _send_certificate(self) -> None:
        if self.failed is not None:
            return
        label = AUTH_CLIENT if self.is_client else AUTH_SERVER
        sig = crypto.sign(self.node_key, label + self._transcript)
        self.send_records([(R_CERT, self.own_cert_der), (R_CERT_VERIFY, sig)])
        self._sent_cert = True
        if not self.is_client:
            self._ready()

    def _on_enc(self, body: bytes) -> None:
        if self._recv_key is None:
            self._fail(STEP_HANDSHAKE, "RecordBeforeKeys")
            return
        seq = self._recv_seq
        nonce = seq.to_bytes(12, "big")
        aad = b"nc2s-chan" + seq.to_bytes(8, "big")
        plain = crypto.aead_open(self._recv_key, nonce, body, aad)
        if plain is None:
            self._fail(STEP_CERTIFICATE, "ChannelIntegrity")
            return
        self._recv_seq += 1
        offset = 0
        pending_cert: bytes | None = None
        while offset + _FRAME.size <= len(plain):
            rtype, length = _FRAME.unpack_from(plain, offset)
            offset += _FRAME.size
            rbody = plain[offset:offset + length]
            offset += length
            if rtype == R_CERT:
                pending_cert = rbody
            elif rtype == R_CERT_VERIFY:
                self._on_peer_certificate(pending_cert, rbody)
                pending_cert = None
            elif rtype == R_ALERT:
                step = rbody[0] if rbody else 0
                self._fail(step, rbody[1:].decode(errors="replace"), alert=False)
            else:
                if self.on_record is not None:
                    self.on_record(self, rtype, rbody)
            if self.failed is not None:
                return

    def _on_peer_certificate(self, cert_der: bytes | None, sig: bytes) -> None:
        if cert_der is None or self.peer_cert is not None:
            self._fail(STEP_CERTIFICATE, "BadCertificateFlight")
            return

        def finish() -> None:
            if self.failed is not None:
                return
            try:
                cert = Certificate(cert_der)
            except Exception:
                self._fail(STEP_CERTIFICATE, "BadCertificateEncoding")
                return
            label = AUTH_SERVER if self.is_client else AUTH_CLIENT
            if not crypto.verify(cert.public_key(), sig, label + self._transcript):
                self._fail(STEP_CERTIFICATE, "BadChannelSignature")
                return
            verdict = self.verify_peer(cert)
            if not verdict:
                self._fail(STEP_CERTIFICATE, verdict.reason or "CertificateRejected")
                return
            self.peer_cert = cert
            if self.is_client:
                self._ready()
            else:
                # now authenticate back to the client
                self.work(COST_SIGN_MS, self._send_certificate)

        self.work(COST_CERT_VERIFY_MS, finish)

    def _ready(self) -> None:
        self.ready = True
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if self.on_ready is not None:
            self.on_ready(self)

    def _on_conn_closed(self, conn, reason: str) -> None:
        if self.failed is None and not self.ready:
            self._fail(STEP_HANDSHAKE, "Timeout" if reason == "timeout" else "Closed",
                       alert=False)

    def _fail(self, step: int, reason: str, alert: bool = True) -> None:
        if self.failed is not None:
            return
        if alert and self._send_key is not None:
            # must go out before failed is set: sends are refused afterwards
            self.alert(step, reason)
        self.failed = Failure(step, reason)
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        self.close()
        if self.on_fail is not None:
            self.on_fail(self, self.failed)
