"""Keys, the single certification authority, device certificates, root-hash
signatures and revocation lists.

Signatures are Ed25519 (deterministic, so golden files stay stable).
Certificates use a minimal proprietary binary encoding, not X.509; the
byte layouts are documented in docs/FORMATS.md.  Private keys live only in
DeviceIdentity / CertificateAuthority objects and in the local trust
directory; they never appear in any image or wire encoding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

KEY_SIZE = 32
SIGNATURE_SIZE = 64
MAX_SUBJECT_LEN = 64

CERT_MAGIC = b"CERT"
CERT_VERSION = 1
CRL_MAGIC = b"CRL0"

# Context prefixes keep the three signed message kinds in disjoint domains.
_CERT_CONTEXT = b"uw-cert:"
_ROOT_CONTEXT = b"uw-root:"
_CRL_CONTEXT = b"uw-crl:"


def _raw_public(key: Ed25519PublicKey) -> bytes:
    from cryptography.hazmat.primitives import serialization

    return key.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def _raw_private(key: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives import serialization

    return key.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )


def _verify(public_key_bytes: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key_bytes).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class Certificate:
    """Device certificate: subject, raw verification key, CA-assigned serial
    and the CA signature over those three fields."""

    subject_id: str
    public_key: bytes
    serial: int
    ca_signature: bytes

    def tbs_bytes(self) -> bytes:
        subject = self.subject_id.encode()
        return _CERT_CONTEXT + struct.pack("<B", len(subject)) + subject + self.public_key + struct.pack("<Q", self.serial)

    def to_bytes(self) -> bytes:
        subject = self.subject_id.encode()
        if not subject or len(subject) > MAX_SUBJECT_LEN:
            raise ValueError("subject id must be 1..64 bytes")
        return (
            CERT_MAGIC
            + struct.pack("<BB", CERT_VERSION, len(subject))
            + subject
            + self.public_key
            + struct.pack("<Q", self.serial)
            + self.ca_signature
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Certificate":
        if len(raw) < 6 or raw[:4] != CERT_MAGIC:
            raise ValueError("bad certificate magic")
        version, subject_len = struct.unpack_from("<BB", raw, 4)
        if version != CERT_VERSION:
            raise ValueError(f"unsupported certificate version {version}")
        if subject_len == 0 or subject_len > MAX_SUBJECT_LEN:
            raise ValueError("bad certificate subject length")
        need = 6 + subject_len + KEY_SIZE + 8 + SIGNATURE_SIZE
        if len(raw) != need:
            raise ValueError("certificate length mismatch")
        off = 6
        subject = raw[off : off + subject_len].decode()
        off += subject_len
        key = raw[off : off + KEY_SIZE]
        off += KEY_SIZE
        (serial,) = struct.unpack_from("<Q", raw, off)
        off += 8
        signature = raw[off:]
        return cls(subject, key, serial, signature)


@dataclass(frozen=True)
class RootSignature:
    """A 32-byte digest and the writer's Ed25519 signature over it."""

    root: bytes
    signature: bytes

    def to_bytes(self) -> bytes:
        if len(self.root) != 32 or len(self.signature) != SIGNATURE_SIZE:
            raise ValueError("root must be 32 bytes, signature 64")
        return self.root + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RootSignature":
        if len(raw) != 32 + SIGNATURE_SIZE:
            raise ValueError("root signature encoding must be 96 bytes")
        return cls(raw[:32], raw[32:])


@dataclass(frozen=True)
class RevocationList:
    """CA-signed set of revoked certificate serials with a monotone version."""

    revoked_serials: frozenset[int]
    version: int
    ca_signature: bytes

    def tbs_bytes(self) -> bytes:
        serials = sorted(self.revoked_serials)
        return (
            _CRL_CONTEXT
            + struct.pack("<QI", self.version, len(serials))
            + b"".join(struct.pack("<Q", s) for s in serials)
        )

    def to_bytes(self) -> bytes:
        serials = sorted(self.revoked_serials)
        return (
            CRL_MAGIC
            + struct.pack("<QI", self.version, len(serials))
            + b"".join(struct.pack("<Q", s) for s in serials)
            + self.ca_signature
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RevocationList":
        if len(raw) < 16 or raw[:4] != CRL_MAGIC:
            raise ValueError("bad revocation list magic")
        version, count = struct.unpack_from("<QI", raw, 4)
        need = 16 + 8 * count + SIGNATURE_SIZE
        if len(raw) != need:
            raise ValueError("revocation list length mismatch")
        serials = frozenset(
            struct.unpack_from("<Q", raw, 16 + 8 * i)[0] for i in range(count)
        )
        return cls(serials, version, raw[16 + 8 * count :])


class CertificateAuthority:
    """The one CA.  Issues device certificates with monotone serials and
    signs revocation lists."""

    def __init__(self, private_key: Optional[Ed25519PrivateKey] = None, next_serial: int = 1):
        self._key = private_key or Ed25519PrivateKey.generate()
        self._next_serial = next_serial

    @property
    def public_key(self) -> bytes:
        return _raw_public(self._key.public_key())

    def issue(self, subject_id: str, public_key: bytes) -> Certificate:
        if not subject_id:
            raise ValueError("subject id must be nonempty")
        if len(public_key) != KEY_SIZE:
            raise ValueError("public key must be 32 raw bytes")
        serial = self._next_serial
        self._next_serial += 1
        unsigned = Certificate(subject_id, public_key, serial, b"")
        signature = self._key.sign(unsigned.tbs_bytes())
        return Certificate(subject_id, public_key, serial, signature)

    def sign_revocations(self, serials: Iterable[int], version: int) -> RevocationList:
        unsigned = RevocationList(frozenset(serials), version, b"")
        return RevocationList(
            unsigned.revoked_serials, version, self._key.sign(unsigned.tbs_bytes())
        )

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "ca.key").write_bytes(_raw_private(self._key))
        (directory / "ca.pub").write_bytes(self.public_key)
        (directory / "ca.serial").write_text(str(self._next_serial))

    @classmethod
    def load(cls, directory: Path) -> "CertificateAuthority":
        key = Ed25519PrivateKey.from_private_bytes((directory / "ca.key").read_bytes())
        next_serial = int((directory / "ca.serial").read_text())
        return cls(key, next_serial)


class DeviceIdentity:
    """A guard device's signing key plus its CA-issued certificate.

    Keys are generated at identity creation (the simulator's stand-in for
    at-production-time provisioning) and are never part of any outward
    serialization.
    """

    def __init__(self, device_id: str, private_key: Ed25519PrivateKey, certificate: Certificate):
        self.device_id = device_id
        self._key = private_key
        self.certificate = certificate

    @classmethod
    def create(cls, device_id: str, ca: CertificateAuthority) -> "DeviceIdentity":
        key = Ed25519PrivateKey.generate()
        cert = ca.issue(device_id, _raw_public(key.public_key()))
        return cls(device_id, key, cert)

    @property
    def public_key(self) -> bytes:
        return _raw_public(self._key.public_key())

    def sign_root(self, root: bytes) -> RootSignature:
        if len(root) != 32:
            raise ValueError("root must be a 32-byte digest")
        return RootSignature(root, self._key.sign(_ROOT_CONTEXT + root))

    def save(self, directory: Path, name: str) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{name}.key").write_bytes(_raw_private(self._key))
        (directory / f"{name}.cert").write_bytes(self.certificate.to_bytes())

    @classmethod
    def load(cls, directory: Path, name: str) -> "DeviceIdentity":
        key = Ed25519PrivateKey.from_private_bytes((directory / f"{name}.key").read_bytes())
        cert = Certificate.from_bytes((directory / f"{name}.cert").read_bytes())
        return cls(cert.subject_id, key, cert)


def verify_certificate(
    cert: Certificate,
    ca_public_key: bytes,
    revocation_list: Optional[RevocationList] = None,
) -> bool:
    """True iff the CA signature is valid and the serial is not revoked."""
    if len(cert.public_key) != KEY_SIZE or len(cert.ca_signature) != SIGNATURE_SIZE:
        return False
    if not _verify(ca_public_key, cert.ca_signature, cert.tbs_bytes()):
        return False
    if revocation_list is not None and cert.serial in revocation_list.revoked_serials:
        return False
    return True


def verify_root_signature(cert: Certificate, root_signature: RootSignature) -> bool:
    return _verify(
        cert.public_key, root_signature.signature, _ROOT_CONTEXT + root_signature.root
    )


def verify_revocation_list(rl: RevocationList, ca_public_key: bytes) -> bool:
    return _verify(ca_public_key, rl.ca_signature, rl.tbs_bytes())


class RevocationListConsumer:
    """Tracks the newest accepted list; replayed or stale versions are refused."""

    def __init__(self, ca_public_key: bytes):
        self._ca_public_key = ca_public_key
        self.current: Optional[RevocationList] = None

    def accept(self, rl: RevocationList) -> bool:
        if not verify_revocation_list(rl, self._ca_public_key):
            return False
        if self.current is not None and rl.version <= self.current.version:
            return False
        self.current = rl
        return True
