"""Long-lived security artifacts: certificates, credentials, revocation lists,
and per-node mission bundles.

Canonical serializations are fixed here so signatures are reproducible:

- credential body: link_type(1) | pk_client(33) | pk_server(33) | cap_len(2 BE)
  | cap utf-8 | t_iss(8 BE) | t_exp(8 BE); the TC1 signature covers all of it,
  and the stored form appends sig_len(2 BE) | signature(DER).
- revocation list file: t_iss(8) | t_exp(8) | count(4) | entries | signature
  (DER); the signature covers t_iss | t_exp | concatenated entries. Entries
  are 32-byte credential digests (CredRl) or 8-byte BE serials (CertRl),
  deduplicated and sorted ascending.

Timestamps are unsigned 64-bit milliseconds since the Unix epoch throughout.
"""

from __future__ import annotations

import hashlib
import ipaddress
import json
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.serialization import Encoding
from cryptography.x509.oid import NameOID

from . import crypto

# Epoch base used by deterministic missions and the virtual clock
# (2026-01-01T00:00:00Z).
DETERMINISTIC_EPOCH_MS = 1_767_225_600_000

DAY_MS = 86_400_000
HOUR_MS = 3_600_000

# Link type codes for the three credentialed link classes.
LINK_TC1_TC2 = 0x01
LINK_TC_GCS = 0x02
LINK_GCS_UXV = 0x03


def link_type_for(role_a: "Role", role_b: "Role") -> int:
    """Link class for a role pairing, orientation-independent."""
    pair = frozenset((role_a, role_b))
    table = {
        frozenset((Role.CT1, Role.CT2)): LINK_TC1_TC2,
        frozenset((Role.CT1, Role.GCS)): LINK_TC_GCS,
        frozenset((Role.CT2, Role.GCS)): LINK_TC_GCS,
        frozenset((Role.GCS, Role.UXV)): LINK_GCS_UXV,
    }
    try:
        return table[pair]
    except KeyError:
        raise ValueError(f"no link class for {role_a.value}-{role_b.value}") from None

# Rejection reasons, exactly one per verification check.
NO_VALID_CERTRL = "NoValidCertRl"
NO_VALID_CREDRL = "NoValidCredRl"
BAD_SIGNATURE = "BadSignature"
EXPIRED = "Expired"
REVOKED = "Revoked"
SUBJECT_MISMATCH = "SubjectMismatch"
WRONG_LINK_TYPE = "WrongLinkType"
OUTSIDE_VALIDITY = "OutsideValidity"
KEY_MISMATCH = "KeyMismatch"


class Role(str, Enum):
    CA = "ca"
    CT1 = "ct1"
    CT2 = "ct2"
    GCS = "gcs"
    UXV = "uxv"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Verdict(True)


def reject(reason: str) -> Verdict:
    return Verdict(False, reason)


@dataclass(frozen=True)
class NodeIdentity:
    common_name: str
    ip_address: str
    role: Role
    public_key: bytes | None = None  # compressed point, when known

    def validate(self) -> None:
        if not self.common_name:
            raise ValueError("common name must be non-empty")
        try:
            ipaddress.IPv4Address(self.ip_address)
        except ipaddress.AddressValueError as exc:
            raise ValueError(f"malformed IPv4 address {self.ip_address!r}") from exc


# --- certificates ----------------------------------------------------------

def _ms_to_dt(ms: int) -> datetime:
    return datetime.fromtimestamp(ms / 1000, tz=timezone.utc)


def _dt_to_ms(dt: datetime) -> int:
    return int(dt.timestamp() * 1000)


class Certificate:
    """Thin wrapper over an X.509 DER blob with the fields NC2S cares about."""

    def __init__(self, der: bytes):
        self.der = der
        self._cert = x509.load_der_x509_certificate(der)

    @classmethod
    def from_pem(cls, pem: bytes) -> "Certificate":
        return cls(x509.load_pem_x509_certificate(pem).public_bytes(Encoding.DER))

    def to_pem(self) -> bytes:
        return self._cert.public_bytes(Encoding.PEM)

    @property
    def serial(self) -> int:
        return self._cert.serial_number

    @property
    def not_before_ms(self) -> int:
        return _dt_to_ms(self._cert.not_valid_before_utc)

    @property
    def not_after_ms(self) -> int:
        return _dt_to_ms(self._cert.not_valid_after_utc)

    @property
    def common_name(self) -> str:
        attrs = self._cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
        return attrs[0].value if attrs else ""

    @property
    def ip_address(self) -> str:
        try:
            san = self._cert.extensions.get_extension_for_class(x509.SubjectAlternativeName)
        except x509.ExtensionNotFound:
            return ""
        ips = san.value.get_values_for_type(x509.IPAddress)
        return str(ips[0]) if ips else ""

    @property
    def role(self) -> Role | None:
        attrs = self._cert.subject.get_attributes_for_oid(NameOID.ORGANIZATIONAL_UNIT_NAME)
        try:
            return Role(attrs[0].value) if attrs else None
        except ValueError:
            return None

    def public_key(self) -> ec.EllipticCurvePublicKey:
        return self._cert.public_key()

    def public_point(self) -> bytes:
        return crypto.point_bytes(self._cert.public_key())

    def subject_identity(self) -> NodeIdentity:
        return NodeIdentity(
            self.common_name, self.ip_address, self.role or Role.UXV, self.public_point()
        )

    def signature_valid_under(self, issuer: "Certificate") -> bool:
        try:
            issuer.public_key().verify(
                self._cert.signature,
                self._cert.tbs_certificate_bytes,
                ec.ECDSA(self._cert.signature_hash_algorithm),
            )
            return True
        except Exception:
            return False

    def __eq__(self, other) -> bool:
        return isinstance(other, Certificate) and other.der == self.der

    def __hash__(self) -> int:
        return hash(self.der)


def _subject_name(identity: NodeIdentity) -> x509.Name:
    return x509.Name(
        [
            x509.NameAttribute(NameOID.COMMON_NAME, identity.common_name),
            x509.NameAttribute(NameOID.ORGANIZATIONAL_UNIT_NAME, identity.role.value),
        ]
    )


def make_ca_certificate(
    ca_key: ec.EllipticCurvePrivateKey, identity: NodeIdentity, validity: tuple[int, int]
) -> Certificate:
    """Self-signed CA root."""
    identity.validate()
    if validity[0] >= validity[1]:
        raise ValueError("empty validity window")
    name = _subject_name(identity)
    builder = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(ca_key.public_key())
        .serial_number(1)
        .not_valid_before(_ms_to_dt(validity[0]))
        .not_valid_after(_ms_to_dt(validity[1]))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.SubjectAlternativeName([x509.IPAddress(ipaddress.IPv4Address(identity.ip_address))]),
            critical=False,
        )
    )
    cert = builder.sign(ca_key, hashes.SHA256(), ecdsa_deterministic=True)
    return Certificate(cert.public_bytes(Encoding.DER))


def issue_certificate(
    ca_key: ec.EllipticCurvePrivateKey,
    ca_cert: Certificate,
    identity: NodeIdentity,
    subject_pub: ec.EllipticCurvePublicKey,
    validity: tuple[int, int],
    serial: int,
) -> Certificate:
    identity.validate()
    if validity[0] >= validity[1]:
        raise ValueError("empty validity window")
    if not 0 < serial < 2**64:
        raise ValueError("serial must fit an unsigned 64-bit integer")
    builder = (
        x509.CertificateBuilder()
        .subject_name(_subject_name(identity))
        .issuer_name(ca_cert._cert.subject)
        .public_key(subject_pub)
        .serial_number(serial)
        .not_valid_before(_ms_to_dt(validity[0]))
        .not_valid_after(_ms_to_dt(validity[1]))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(
            x509.SubjectAlternativeName([x509.IPAddress(ipaddress.IPv4Address(identity.ip_address))]),
            critical=False,
        )
    )
    cert = builder.sign(ca_key, hashes.SHA256(), ecdsa_deterministic=True)
    return Certificate(cert.public_bytes(Encoding.DER))


def verify_certificate(
    cert: Certificate,
    ca_cert: Certificate,
    rl: "CertRl | None",
    now: int,
    expected: NodeIdentity,
) -> Verdict:
    """The five-check certificate verdict.

    Checks run in order: stored valid CertRl, CA signature, validity period,
    revocation, subject match; the first failure names the verdict.
    """
    if rl is None or not rl.valid_at(now):
        return reject(NO_VALID_CERTRL)
    if not cert.signature_valid_under(ca_cert):
        return reject(BAD_SIGNATURE)
    if not cert.not_before_ms <= now <= cert.not_after_ms:
        return reject(EXPIRED)
    if cert.serial in rl.serials:
        return reject(REVOKED)
    if cert.common_name != expected.common_name or cert.ip_address != expected.ip_address:
        return reject(SUBJECT_MISMATCH)
    return ACCEPT


# --- credentials -----------------------------------------------------------

@dataclass(frozen=True)
class Credential:
    link_type: int
    pk_client: bytes
    pk_server: bytes
    cap: str
    t_iss: int
    t_exp: int
    signature: bytes

    def signed_body(self) -> bytes:
        cap_bytes = self.cap.encode()
        return (
            bytes([self.link_type])
            + self.pk_client
            + self.pk_server
            + struct.pack(">H", len(cap_bytes))
            + cap_bytes
            + struct.pack(">QQ", self.t_iss, self.t_exp)
        )

    def to_bytes(self) -> bytes:
        return self.signed_body() + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "Credential":
        if len(data) < 1 + 33 + 33 + 2 + 16 + 2:
            raise ValueError("credential too short")
        link_type = data[0]
        pk_client = data[1:34]
        pk_server = data[34:67]
        (cap_len,) = struct.unpack_from(">H", data, 67)
        offset = 69 + cap_len
        cap = data[69:offset].decode()
        t_iss, t_exp = struct.unpack_from(">QQ", data, offset)
        offset += 16
        (sig_len,) = struct.unpack_from(">H", data, offset)
        offset += 2
        signature = data[offset : offset + sig_len]
        if len(signature) != sig_len or offset + sig_len != len(data):
            raise ValueError("credential truncated")
        return cls(link_type, pk_client, pk_server, cap, t_iss, t_exp, signature)


def sign_credential(
    tc1_key: ec.EllipticCurvePrivateKey,
    link_type: int,
    pk_client: bytes,
    pk_server: bytes,
    cap: str,
    t_iss: int,
    t_exp: int,
    policy=None,
) -> Credential:
    if t_iss >= t_exp:
        raise ValueError("credential validity window is empty")
    if len(pk_client) != crypto.POINT_LEN or len(pk_server) != crypto.POINT_LEN:
        raise ValueError("public keys must be compressed 33-byte points")
    if policy is not None:
        for token in cap.split(","):
            if token not in policy.categories:
                raise ValueError(f"capacity token {token!r} unknown to the mission policy")
    unsigned = Credential(link_type, pk_client, pk_server, cap, t_iss, t_exp, b"")
    return replace(unsigned, signature=crypto.sign(tc1_key, unsigned.signed_body()))


def credential_hash(cred: Credential) -> bytes:
    """SHA-256 over the full serialization, signature included."""
    return hashlib.sha256(cred.to_bytes()).digest()


def verify_credential(
    cred: Credential,
    rl: "CredRl | None",
    now: int,
    tc1_pub: ec.EllipticCurvePublicKey,
    expected_client: bytes,
    expected_server: bytes,
    link_ctx: int,
) -> Verdict:
    """The six-check credential verdict, in the canonical order."""
    if rl is None or not rl.valid_at(now):
        return reject(NO_VALID_CREDRL)
    if cred.link_type != link_ctx:
        return reject(WRONG_LINK_TYPE)
    if not crypto.verify(tc1_pub, cred.signature, cred.signed_body()):
        return reject(BAD_SIGNATURE)
    if not cred.t_iss <= now <= cred.t_exp:
        return reject(OUTSIDE_VALIDITY)
    if cred.pk_client != expected_client or cred.pk_server != expected_server:
        return reject(KEY_MISMATCH)
    if credential_hash(cred) in rl.hash_set:
        return reject(REVOKED)
    return ACCEPT


# --- revocation lists ------------------------------------------------------

def _rl_signed_body(t_iss: int, t_exp: int, entries: list[bytes]) -> bytes:
    return struct.pack(">QQ", t_iss, t_exp) + b"".join(entries)


def _rl_to_bytes(t_iss: int, t_exp: int, entries: list[bytes], signature: bytes) -> bytes:
    return (
        struct.pack(">QQ", t_iss, t_exp)
        + struct.pack(">I", len(entries))
        + b"".join(entries)
        + signature
    )


def _rl_from_bytes(data: bytes, entry_size: int) -> tuple[int, int, list[bytes], bytes]:
    if len(data) < 20:
        raise ValueError("revocation list too short")
    t_iss, t_exp, count = struct.unpack_from(">QQI", data)
    offset = 20
    end = offset + count * entry_size
    if end > len(data):
        raise ValueError("revocation list truncated")
    entries = [data[i : i + entry_size] for i in range(offset, end, entry_size)]
    return t_iss, t_exp, entries, data[end:]


@dataclass(frozen=True)
class CredRl:
    t_iss: int
    t_exp: int
    hash_list: tuple[bytes, ...]
    signature: bytes

    ENTRY_SIZE = 32

    @property
    def hash_set(self) -> frozenset[bytes]:
        return frozenset(self.hash_list)

    def valid_at(self, now: int) -> bool:
        return self.t_iss <= now <= self.t_exp

    def signature_valid_under(self, tc1_pub: ec.EllipticCurvePublicKey) -> bool:
        return crypto.verify(
            tc1_pub, self.signature, _rl_signed_body(self.t_iss, self.t_exp, list(self.hash_list))
        )

    def to_bytes(self) -> bytes:
        return _rl_to_bytes(self.t_iss, self.t_exp, list(self.hash_list), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CredRl":
        t_iss, t_exp, entries, sig = _rl_from_bytes(data, cls.ENTRY_SIZE)
        return cls(t_iss, t_exp, tuple(entries), sig)


@dataclass(frozen=True)
class CertRl:
    t_iss: int
    t_exp: int
    serials: frozenset[int]
    signature: bytes

    ENTRY_SIZE = 8

    def valid_at(self, now: int) -> bool:
        return self.t_iss <= now <= self.t_exp

    def _entries(self) -> list[bytes]:
        return [struct.pack(">Q", s) for s in sorted(self.serials)]

    def signature_valid_under(self, ca_pub: ec.EllipticCurvePublicKey) -> bool:
        return crypto.verify(
            ca_pub, self.signature, _rl_signed_body(self.t_iss, self.t_exp, self._entries())
        )

    def to_bytes(self) -> bytes:
        return _rl_to_bytes(self.t_iss, self.t_exp, self._entries(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CertRl":
        t_iss, t_exp, entries, sig = _rl_from_bytes(data, cls.ENTRY_SIZE)
        serials = frozenset(struct.unpack(">Q", e)[0] for e in entries)
        return cls(t_iss, t_exp, serials, sig)


def build_credrl(
    tc1_key: ec.EllipticCurvePrivateKey, revoked: list[bytes], validity: tuple[int, int]
) -> CredRl:
    if validity[0] >= validity[1]:
        raise ValueError("empty validity window")
    entries = sorted(set(revoked))
    sig = crypto.sign(tc1_key, _rl_signed_body(validity[0], validity[1], entries))
    return CredRl(validity[0], validity[1], tuple(entries), sig)


def build_certrl(
    ca_key: ec.EllipticCurvePrivateKey, serials: list[int], validity: tuple[int, int]
) -> CertRl:
    if validity[0] >= validity[1]:
        raise ValueError("empty validity window")
    unique = frozenset(serials)
    entries = [struct.pack(">Q", s) for s in sorted(unique)]
    sig = crypto.sign(ca_key, _rl_signed_body(validity[0], validity[1], entries))
    return CertRl(validity[0], validity[1], unique, sig)


# --- mission bundles -------------------------------------------------------

BUNDLE_FILES = {
    "ca_cert": "ca_cert.pem",
    "node_cert": "node_cert.pem",
    "node_key": "node_key.pem",
    "tc1_pub": "tc1_pub.pem",
    "cert_rl": "cert_rl.bin",
    "cred_rl": "cred_rl.bin",
    "policy": "policy.json",
    "node": "node.json",
}


@dataclass
class NodeRecord:
    """Master-list entry kept by TC1 for every enrolled node."""

    identity: NodeIdentity
    serial: int
    tls_port: int
    udp_port: int
    cert_pem: str

    def to_json(self) -> dict:
        return {
            "cn": self.identity.common_name,
            "ip": self.identity.ip_address,
            "role": self.identity.role.value,
            "public_key": self.identity.public_key.hex(),
            "serial": self.serial,
            "tls_port": self.tls_port,
            "udp_port": self.udp_port,
            "cert_pem": self.cert_pem,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NodeRecord":
        return cls(
            NodeIdentity(doc["cn"], doc["ip"], Role(doc["role"]), bytes.fromhex(doc["public_key"])),
            doc["serial"],
            doc["tls_port"],
            doc["udp_port"],
            doc["cert_pem"],
        )


@dataclass
class ConfigBundle:
    identity: NodeIdentity
    ca_certificate: Certificate
    own_certificate: Certificate
    own_private_key: ec.EllipticCurvePrivateKey
    tc1_public_key: bytes
    server_port: int
    udp_port: int
    client_port_range: tuple[int, int]
    cert_rl: CertRl
    cred_rl: CredRl
    policy_doc: dict
    mission_epoch_ms: int
    key_lifetime_ms: int
    master: list[NodeRecord] | None = None  # TC1 only

    def self_check(self, now: int | None = None) -> Verdict:
        """Bundle consistency: cert chain, identity, key-pair match."""
        now = self.mission_epoch_ms if now is None else now
        verdict = verify_certificate(
            self.own_certificate, self.ca_certificate, self.cert_rl, now, self.identity
        )
        if not verdict:
            return verdict
        own_point = crypto.point_bytes(self.own_private_key.public_key())
        if own_point != self.own_certificate.public_point():
            return reject(KEY_MISMATCH)
        if not self.cred_rl.signature_valid_under(crypto.point_from_bytes(self.tc1_public_key)):
            return reject(BAD_SIGNATURE)
        return ACCEPT


def write_bundle(directory: Path, bundle: ConfigBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / BUNDLE_FILES["ca_cert"]).write_bytes(bundle.ca_certificate.to_pem())
    (directory / BUNDLE_FILES["node_cert"]).write_bytes(bundle.own_certificate.to_pem())
    (directory / BUNDLE_FILES["node_key"]).write_bytes(crypto.key_to_pem(bundle.own_private_key))
    (directory / BUNDLE_FILES["tc1_pub"]).write_bytes(
        crypto.public_key_to_pem(crypto.point_from_bytes(bundle.tc1_public_key))
    )
    (directory / BUNDLE_FILES["cert_rl"]).write_bytes(bundle.cert_rl.to_bytes())
    (directory / BUNDLE_FILES["cred_rl"]).write_bytes(bundle.cred_rl.to_bytes())
    (directory / BUNDLE_FILES["policy"]).write_text(
        json.dumps(bundle.policy_doc, indent=2, sort_keys=True) + "\n"
    )
    node_doc = {
        "cn": bundle.identity.common_name,
        "ip": bundle.identity.ip_address,
        "role": bundle.identity.role.value,
        "tls_port": bundle.server_port,
        "udp_port": bundle.udp_port,
        "client_port_range": list(bundle.client_port_range),
        "mission_epoch_ms": bundle.mission_epoch_ms,
        "key_lifetime_ms": bundle.key_lifetime_ms,
    }
    (directory / BUNDLE_FILES["node"]).write_text(json.dumps(node_doc, indent=2, sort_keys=True) + "\n")
    if bundle.master is not None:
        master_dir = directory / "master"
        master_dir.mkdir(exist_ok=True)
        (master_dir / "nodes.json").write_text(
            json.dumps([r.to_json() for r in bundle.master], indent=2, sort_keys=True) + "\n"
        )


def load_bundle(directory: Path) -> ConfigBundle:
    directory = Path(directory)
    node_doc = json.loads((directory / BUNDLE_FILES["node"]).read_text())
    ca_cert = Certificate.from_pem((directory / BUNDLE_FILES["ca_cert"]).read_bytes())
    own_cert = Certificate.from_pem((directory / BUNDLE_FILES["node_cert"]).read_bytes())
    own_key = crypto.key_from_pem((directory / BUNDLE_FILES["node_key"]).read_bytes())
    tc1_pub = crypto.public_key_from_pem((directory / BUNDLE_FILES["tc1_pub"]).read_bytes())
    master = None
    master_file = directory / "master" / "nodes.json"
    if master_file.exists():
        master = [NodeRecord.from_json(doc) for doc in json.loads(master_file.read_text())]
    identity = NodeIdentity(
        node_doc["cn"], node_doc["ip"], Role(node_doc["role"]), own_cert.public_point()
    )
    return ConfigBundle(
        identity=identity,
        ca_certificate=ca_cert,
        own_certificate=own_cert,
        own_private_key=own_key,
        tc1_public_key=crypto.point_bytes(tc1_pub),
        server_port=node_doc["tls_port"],
        udp_port=node_doc["udp_port"],
        client_port_range=tuple(node_doc["client_port_range"]),
        cert_rl=CertRl.from_bytes((directory / BUNDLE_FILES["cert_rl"]).read_bytes()),
        cred_rl=CredRl.from_bytes((directory / BUNDLE_FILES["cred_rl"]).read_bytes()),
        policy_doc=json.loads((directory / BUNDLE_FILES["policy"]).read_text()),
        mission_epoch_ms=node_doc["mission_epoch_ms"],
        key_lifetime_ms=node_doc["key_lifetime_ms"],
        master=master,
    )


@dataclass
class Mission:
    ca_key: ec.EllipticCurvePrivateKey
    ca_cert: Certificate
    bundles: dict[str, ConfigBundle] = field(default_factory=dict)


def generate_mission(
    node_list: list[NodeIdentity],
    policy_doc: dict,
    *,
    seed: int | None = None,
    epoch_ms: int = DETERMINISTIC_EPOCH_MS,
    cert_lifetime_ms: int = 30 * DAY_MS,
    rl_lifetime_ms: int = 7 * DAY_MS,
    key_lifetime_ms: int = HOUR_MS,
    base_tls_port: int = 46000,
    base_udp_port: int = 47000,
) -> Mission:
    """Imprint a mission: CA root, per-node key pairs and certificates, TC1's
    public key, empty revocation lists, and the policy, one bundle per node.

    A seed makes every key, serial and signature a pure function of
    (seed, node list, epoch); omitting it generates random keys.
    """
    if not node_list:
        raise ValueError("node list must not be empty")
    names = [n.common_name for n in node_list]
    ips = [n.ip_address for n in node_list]
    if len(set(names)) != len(names) or len(set(ips)) != len(ips):
        raise ValueError("node common names and IPs must be unique")
    tc1_nodes = [n for n in node_list if n.role == Role.CT1]
    if len(tc1_nodes) != 1:
        raise ValueError("mission needs exactly one CT1 node")
    for identity in node_list:
        identity.validate()

    def key_seed(label: str) -> bytes | None:
        return None if seed is None else f"{seed}:{label}".encode()

    ca_key = crypto.generate_key(key_seed("ca"))
    ca_identity = NodeIdentity("MISSION-CA", "10.10.0.250", Role.CA)
    validity = (epoch_ms - HOUR_MS, epoch_ms + cert_lifetime_ms)
    ca_cert = make_ca_certificate(ca_key, ca_identity, validity)

    node_keys = {n.common_name: crypto.generate_key(key_seed(f"key:{n.common_name}")) for n in node_list}
    certs: dict[str, Certificate] = {}
    records: list[NodeRecord] = []
    for i, identity in enumerate(node_list):
        serial = i + 2  # serial 1 is the CA root
        cert = issue_certificate(
            ca_key, ca_cert, identity, node_keys[identity.common_name].public_key(), validity, serial
        )
        certs[identity.common_name] = cert
        records.append(
            NodeRecord(
                replace(identity, public_key=cert.public_point()),
                serial,
                base_tls_port + i,
                base_udp_port + i,
                cert.to_pem().decode(),
            )
        )

    tc1_cn = tc1_nodes[0].common_name
    tc1_key = node_keys[tc1_cn]
    tc1_point = crypto.point_bytes(tc1_key.public_key())
    rl_validity = (epoch_ms - HOUR_MS, epoch_ms + rl_lifetime_ms)
    cert_rl = build_certrl(ca_key, [], rl_validity)
    cred_rl = build_credrl(tc1_key, [], rl_validity)

    mission = Mission(ca_key=ca_key, ca_cert=ca_cert)
    for i, identity in enumerate(node_list):
        cn = identity.common_name
        mission.bundles[cn] = ConfigBundle(
            identity=replace(identity, public_key=certs[cn].public_point()),
            ca_certificate=ca_cert,
            own_certificate=certs[cn],
            own_private_key=node_keys[cn],
            tc1_public_key=tc1_point,
            server_port=base_tls_port + i,
            udp_port=base_udp_port + i,
            client_port_range=(48000 + 10 * i, 48009 + 10 * i),
            cert_rl=cert_rl,
            cred_rl=cred_rl,
            policy_doc=policy_doc,
            mission_epoch_ms=epoch_ms,
            key_lifetime_ms=key_lifetime_ms,
            master=list(records) if identity.role == Role.CT1 else None,
        )
    return mission


def default_node_list() -> list[NodeIdentity]:
    """The four-node reference topology."""
    return [
        NodeIdentity("TC1", "10.10.0.1", Role.CT1),
        NodeIdentity("TC2", "10.10.0.2", Role.CT2),
        NodeIdentity("GCS1", "10.10.2.20", Role.GCS),
        NodeIdentity("UXV1", "10.10.3.30", Role.UXV),
    ]
