"""Session key derivation and the nonce-based renewal machine.

The master secret is the static-static ECDH of the two nodes' certificate
keys. Directional keys come from HKDF-SHA256 with the renewal nonce as salt
and direction labels plus both public keys in the info string, so no key
material ever needs to cross the wire: renewal ships a 4-byte nonce and
nothing else.

Renewal choreography (client initiates):

    client                          server
      0x11 (empty)  ------------->   derive new keys, keep old, DUAL
      apply nonce,  <-------------  0x12 (nonce)
      replace keys
      next message under new keys ->  verifies under new: confirm, drop old
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from enum import Enum

from cryptography.hazmat.primitives.asymmetric import ec

from . import crypto

INFO_C2S = b"NC2S-C2S"
INFO_S2C = b"NC2S-S2C"
NONCE_LEN = 4

# Client-side renewal policy: trigger at 80% of key lifetime, retry the 0x11
# every 2 s up to 5 times.
RENEWAL_TRIGGER_FRACTION = 0.8
RENEWAL_RETRY_MS = 2_000
RENEWAL_MAX_TRIES = 5


@dataclass(frozen=True)
class MasterSecret:
    secret: bytes
    established_at: int


@dataclass(frozen=True)
class DirectionalKeys:
    c2s: bytes
    s2c: bytes
    epoch: int = 0


class Phase(Enum):
    NORMAL = "Normal"
    CLIENT_REQUESTED = "ClientRequested"
    SERVER_DUAL_KEY = "ServerDualKey"


@dataclass(frozen=True)
class RenewalState:
    phase: Phase
    keys: DirectionalKeys
    new_keys: DirectionalKeys | None = None
    nonce: bytes | None = None
    dual_deadline: int | None = None


def ecdh_master(
    own_private: ec.EllipticCurvePrivateKey,
    peer_public: ec.EllipticCurvePublicKey,
    established_at: int = 0,
) -> MasterSecret:
    """Symmetric by construction: both sides compute the same 32 bytes."""
    return MasterSecret(crypto.ecdh(own_private, peer_public), established_at)


def derive_session_keys(
    ms: MasterSecret, pk_client: bytes, pk_server: bytes, nonce: bytes | None = None,
    epoch: int = 0,
) -> DirectionalKeys:
    salt = nonce or b""
    suffix = pk_client + pk_server
    c2s = crypto.hkdf_sha256(ms.secret, salt=salt, info=INFO_C2S + suffix)
    s2c = crypto.hkdf_sha256(ms.secret, salt=salt, info=INFO_S2C + suffix)
    return DirectionalKeys(c2s, s2c, epoch)


def initial_state(keys: DirectionalKeys) -> RenewalState:
    return RenewalState(Phase.NORMAL, keys)


def mark_client_requested(state: RenewalState) -> RenewalState:
    """Client bookkeeping when the 0x11 goes out (its "key renewal" list)."""
    return replace(state, phase=Phase.CLIENT_REQUESTED)


def server_begin_renewal(
    state: RenewalState,
    ms: MasterSecret,
    pk_client: bytes,
    pk_server: bytes,
    rng: random.Random,
    dual_deadline: int | None = None,
) -> tuple[bytes, RenewalState]:
    """On a verified 0x11: mint a nonce, derive new keys alongside the old.

    A repeat request while already in dual-key state re-issues the same nonce
    rather than minting another (idempotent against a lost 0x12).
    """
    if state.phase is Phase.SERVER_DUAL_KEY:
        assert state.nonce is not None
        return state.nonce, state
    if state.phase is not Phase.NORMAL:
        raise ValueError(f"renewal cannot begin from {state.phase}")
    nonce = rng.randbytes(NONCE_LEN)
    new_keys = derive_session_keys(ms, pk_client, pk_server, nonce, epoch=state.keys.epoch + 1)
    return nonce, RenewalState(
        Phase.SERVER_DUAL_KEY, state.keys, new_keys, nonce, dual_deadline
    )


def client_apply_nonce(
    state: RenewalState, ms: MasterSecret, pk_client: bytes, pk_server: bytes, nonce: bytes
) -> RenewalState:
    """Derive and immediately adopt the new keys; repeat nonces are no-ops."""
    if state.nonce == nonce and state.phase is Phase.NORMAL:
        return state
    new_keys = derive_session_keys(ms, pk_client, pk_server, nonce, epoch=state.keys.epoch + 1)
    return RenewalState(Phase.NORMAL, new_keys, None, nonce, None)


def server_confirm(state: RenewalState) -> RenewalState:
    """First message verified under the new keys: discard the old set."""
    if state.phase is not Phase.SERVER_DUAL_KEY:
        raise ValueError(f"confirm is only valid in dual-key state, not {state.phase}")
    assert state.new_keys is not None
    return RenewalState(Phase.NORMAL, state.new_keys, None, state.nonce, None)


def expire_dual(state: RenewalState) -> RenewalState:
    """Dual-key deadline passed: the old keys are beyond their lifetime, keep
    the new set only."""
    if state.phase is not Phase.SERVER_DUAL_KEY:
        return state
    assert state.new_keys is not None
    return RenewalState(Phase.NORMAL, state.new_keys, None, state.nonce, None)


def receive_keys(state: RenewalState, *, server_side: bool) -> list[bytes]:
    """Key candidates for verifying an inbound datagram, old first.

    Only a server in dual-key state ever offers two keys; everywhere else the
    failing HMAC is final and no other key is tried.
    """
    direction = "c2s" if server_side else "s2c"
    keys = [getattr(state.keys, direction)]
    if state.phase is Phase.SERVER_DUAL_KEY and server_side:
        assert state.new_keys is not None
        keys.append(getattr(state.new_keys, direction))
    return keys


def send_key(state: RenewalState, *, server_side: bool) -> bytes:
    """Key for an outbound datagram.

    A dual-key server already sends under the new set: the client switches the
    moment the nonce lands, so the new keys are the ones it can verify.
    """
    direction = "s2c" if server_side else "c2s"
    if state.phase is Phase.SERVER_DUAL_KEY and server_side:
        assert state.new_keys is not None
        return getattr(state.new_keys, direction)
    return getattr(state.keys, direction)


def renewal_due(key_established_at: int, key_lifetime_ms: int, now: int) -> bool:
    return now - key_established_at >= RENEWAL_TRIGGER_FRACTION * key_lifetime_ms
