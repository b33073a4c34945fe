"""Authenticated datagram codec and replay protection.

Wire layout, bit-exact:

    msg_type(1) | payload_len(2, big-endian) | payload | timestamp(8, big-endian
    epoch-ms) | tag(16)

The tag is HMAC-SHA256 truncated to its leading 16 bytes, computed over
msg_type | payload | timestamp. The length field is implied by the payload and
is not part of the MAC input.
"""

from __future__ import annotations

import heapq
import hmac as hmac_mod
import hashlib
import struct
from dataclasses import dataclass
from enum import Enum

HEADER_LEN = 3          # type + payload_len
TRAILER_LEN = 24        # timestamp + tag
TAG_LEN = 16
MAX_PAYLOAD = 65535
REPLAY_WINDOW_MS = 400

# Message type registry. Codes 0x05/0x08/0x09/0x06/0x10/0x11/0x13/0x14/0x15
# are protocol-assigned; the rest are mission constants.
DATA = 0x01
CERTRL_UPDATE = 0x02
CREDRL_UPDATE = 0x03
ORDER_CT2 = 0x05
MAP_REPORT = 0x06
ORDER_GCS = 0x08
ORDER_UXV = 0x09
MAP_AGGREGATE = 0x10
KEY_RENEWAL_REQ = 0x11
KEY_RENEWAL_NONCE = 0x12
CRED_UPDATE_CT2 = 0x13
CRED_UPDATE_GCS = 0x14
CRED_UPDATE_UXV = 0x15

MESSAGE_TYPES: dict[int, str] = {
    DATA: "DATA",
    CERTRL_UPDATE: "CERTRL_UPDATE",
    CREDRL_UPDATE: "CREDRL_UPDATE",
    ORDER_CT2: "ORDER_CT2",
    MAP_REPORT: "MAP_REPORT",
    ORDER_GCS: "ORDER_GCS",
    ORDER_UXV: "ORDER_UXV",
    MAP_AGGREGATE: "MAP_AGGREGATE",
    KEY_RENEWAL_REQ: "KEY_RENEWAL_REQ",
    KEY_RENEWAL_NONCE: "KEY_RENEWAL_NONCE",
    CRED_UPDATE_CT2: "CRED_UPDATE_CT2",
    CRED_UPDATE_GCS: "CRED_UPDATE_GCS",
    CRED_UPDATE_UXV: "CRED_UPDATE_UXV",
}

# Always-authorized maintenance types; see policy.authorize.
INFRA_TYPES = frozenset({CERTRL_UPDATE, CREDRL_UPDATE, KEY_RENEWAL_REQ, KEY_RENEWAL_NONCE})


class Reject(Enum):
    MALFORMED = "Malformed"
    BAD_TAG = "BadTag"
    STALE = "Stale"
    DUPLICATE = "Duplicate"
    UNKNOWN_TYPE = "UnknownType"


@dataclass(frozen=True)
class Nc2sMessage:
    msg_type: int
    payload: bytes
    timestamp: int


@dataclass(frozen=True)
class Verified:
    message: Nc2sMessage
    key_index: int  # which of the offered keys authenticated the datagram


def hmac_trunc(key: bytes, data: bytes) -> bytes:
    """Leading 16 bytes of HMAC-SHA256."""
    return hmac_mod.new(key, data, hashlib.sha256).digest()[:TAG_LEN]


def encode(msg_type: int, payload: bytes, timestamp: int, key: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload {len(payload)} exceeds {MAX_PAYLOAD} bytes")
    ts = struct.pack(">Q", timestamp)
    tag = hmac_trunc(key, bytes([msg_type]) + payload + ts)
    return struct.pack(">BH", msg_type, len(payload)) + payload + ts + tag


def parse(data: bytes) -> Nc2sMessage | None:
    """Structural parse only; None when the framing is wrong."""
    if len(data) < HEADER_LEN + TRAILER_LEN:
        return None
    msg_type, payload_len = struct.unpack_from(">BH", data)
    if len(data) != HEADER_LEN + payload_len + TRAILER_LEN:
        return None
    payload = data[HEADER_LEN : HEADER_LEN + payload_len]
    (timestamp,) = struct.unpack_from(">Q", data, HEADER_LEN + payload_len)
    return Nc2sMessage(msg_type, payload, timestamp)


class ReplayWindow:
    """Exact-timestamp duplicate tracking with bounded memory.

    Purging keeps only timestamps that could still pass the freshness check,
    so |seen| is bounded by window span times the peer's message rate.
    """

    def __init__(self, window_ms: int = REPLAY_WINDOW_MS):
        self.window_ms = window_ms
        self.seen: set[int] = set()
        self._order: list[int] = []  # min-heap for purging

    def __contains__(self, timestamp: int) -> bool:
        return timestamp in self.seen

    def add(self, timestamp: int) -> None:
        if timestamp not in self.seen:
            self.seen.add(timestamp)
            heapq.heappush(self._order, timestamp)

    def purge(self, oldest_valid: int) -> None:
        while self._order and self._order[0] < oldest_valid:
            self.seen.discard(heapq.heappop(self._order))


def decode_and_verify(
    data: bytes,
    key: bytes | list[bytes],
    window: ReplayWindow,
    now: int,
    *,
    expected_age_ms: int = 0,
) -> Verified | Reject:
    """Full receive pipeline for one datagram.

    Check order: structure, tag, registry membership, freshness, duplicate.
    The tag is checked before any replay bookkeeping so forged traffic cannot
    pollute the window, and an unknown-but-authenticated type is counted apart
    from plain forgeries. ``expected_age_ms`` is the session's calibrated
    inbound message age (clock offset plus path delay) from establishment;
    freshness requires the observed age to sit within the 400 ms window around
    it.
    """
    msg = parse(data)
    if msg is None:
        return Reject.MALFORMED

    keys = [key] if isinstance(key, (bytes, bytearray)) else list(key)
    ts = struct.pack(">Q", msg.timestamp)
    mac_input = bytes([msg.msg_type]) + msg.payload + ts
    tag = data[-TAG_LEN:]
    key_index = -1
    for i, candidate in enumerate(keys):
        if hmac_mod.compare_digest(hmac_trunc(candidate, mac_input), tag):
            key_index = i
            break
    if key_index < 0:
        return Reject.BAD_TAG

    if msg.msg_type not in MESSAGE_TYPES:
        return Reject.UNKNOWN_TYPE

    residual = (now - msg.timestamp) - expected_age_ms
    if abs(residual) > window.window_ms:
        return Reject.STALE

    window.purge(now - expected_age_ms - window.window_ms)
    if msg.timestamp in window:
        return Reject.DUPLICATE
    window.add(msg.timestamp)
    return Verified(msg, key_index)
