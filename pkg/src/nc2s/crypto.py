"""Elliptic-curve and KDF primitives shared by every NC2S component.

All signatures are RFC 6979 deterministic ECDSA over P-256 so that two runs
from the same seeds produce identical bytes end to end.
"""

from __future__ import annotations

import hashlib

from cryptography.exceptions import InvalidSignature, UnsupportedAlgorithm
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

CURVE = ec.SECP256R1()
POINT_LEN = 33  # compressed SEC1 encoding
SIG_HASH = hashes.SHA256

# P-256 group order; seeded scalars are clamped into [1, n-1].
P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

try:
    _DET_SIG = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
except TypeError:  # pragma: no cover - only on very old cryptography
    raise UnsupportedAlgorithm("deterministic ECDSA support is required")
_VERIFY_SIG = ec.ECDSA(hashes.SHA256())


def generate_key(seed: bytes | None = None) -> ec.EllipticCurvePrivateKey:
    """Fresh P-256 key; with a seed, the key is a pure function of its bytes."""
    if seed is None:
        return ec.generate_private_key(CURVE)
    digest = hashlib.sha256(b"nc2s-key:" + seed).digest()
    scalar = int.from_bytes(digest, "big") % (P256_ORDER - 1) + 1
    return ec.derive_private_key(scalar, CURVE)


def private_key_from_scalar(scalar: int) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(scalar, CURVE)


def sign(key: ec.EllipticCurvePrivateKey, data: bytes) -> bytes:
    """DER-encoded ECDSA-SHA256 signature, deterministic per RFC 6979."""
    return key.sign(data, _DET_SIG)


def verify(pub: ec.EllipticCurvePublicKey, signature: bytes, data: bytes) -> bool:
    try:
        pub.verify(signature, data, _VERIFY_SIG)
        return True
    except InvalidSignature:
        return False


def point_bytes(pub: ec.EllipticCurvePublicKey) -> bytes:
    """Compressed 33-byte SEC1 encoding."""
    return pub.public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )


def point_from_bytes(data: bytes) -> ec.EllipticCurvePublicKey:
    """Decode a compressed point; raises ValueError off curve or malformed."""
    if len(data) != POINT_LEN:
        raise ValueError(f"expected {POINT_LEN} point bytes, got {len(data)}")
    return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, data)


def ecdh(priv: ec.EllipticCurvePrivateKey, pub: ec.EllipticCurvePublicKey) -> bytes:
    """Shared-secret x-coordinate, 32 bytes."""
    return priv.exchange(ec.ECDH(), pub)


def hkdf_sha256(ikm: bytes, *, salt: bytes = b"", info: bytes = b"", length: int = 32) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=length, salt=salt or None, info=info
    ).derive(ikm)


def aead_seal(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    return AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_open(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes | None:
    """Plaintext, or None on authentication failure."""
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, aad)
    except Exception:
        return None


# --- PEM helpers -----------------------------------------------------------

def key_to_pem(key: ec.EllipticCurvePrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def key_from_pem(data: bytes) -> ec.EllipticCurvePrivateKey:
    key = serialization.load_pem_private_key(data, password=None)
    if not isinstance(key, ec.EllipticCurvePrivateKey):
        raise ValueError("not an EC private key")
    return key


def public_key_to_pem(pub: ec.EllipticCurvePublicKey) -> bytes:
    return pub.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def public_key_from_pem(data: bytes) -> ec.EllipticCurvePublicKey:
    pub = serialization.load_pem_public_key(data)
    if not isinstance(pub, ec.EllipticCurvePublicKey):
        raise ValueError("not an EC public key")
    return pub


def sub_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for independent RNG streams."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")
