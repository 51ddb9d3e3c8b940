"""The one sanctioned path for data to enter the protected realm.

An authenticated operator asks to move a file; an ordered, deny-by-default
rule list decides; allowed files are packed onto the target's secure
partition through the integrity session.  Every attempt, including failed
authentications, leaves exactly one audit record.

Policy file syntax (first match wins):

    ALLOW hash <64-hex-sha256>
    ALLOW name <glob>
    DENY  size > <bytes>

Audit log lines are tab-separated:
    seq  timestamp  operator  file  sha256  decision  reason

Files on the secure partition use a packed archive: u32 file count, then
per file u16 name length, name bytes, u64 content length, content bytes,
zero-padded to a whole number of blocks.
"""

from __future__ import annotations

import fnmatch
import hashlib
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .integrity import (
    BlockedError,
    InhibitedError,
    IntegritySession,
    TamperDetectedError,
)

REJECT_POLICY = "policy-deny"
REJECT_SESSION = "session-blocked"


class AuthDenied(Exception):
    """Operator authentication failed."""


class TransferRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class PolicyRule:
    action: str  # ALLOW | DENY
    kind: str  # hash | name | size
    value: object

    def matches(self, name: str, data: bytes) -> bool:
        if self.kind == "hash":
            return hashlib.sha256(data).hexdigest() == self.value
        if self.kind == "name":
            return fnmatch.fnmatch(name, self.value)
        if self.kind == "size":
            return len(data) > self.value
        return False


class Policy:
    """Ordered first-match rules; anything unmatched is denied."""

    def __init__(self, rules: list[PolicyRule]):
        self.rules = rules

    def evaluate(self, name: str, data: bytes) -> tuple[str, str]:
        for i, rule in enumerate(self.rules):
            if rule.matches(name, data):
                return rule.action, f"rule-{i}:{rule.kind}"
        return "DENY", "default-deny"

    @classmethod
    def parse(cls, text: str) -> "Policy":
        rules = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            action = parts[0].upper()
            if action not in ("ALLOW", "DENY") or len(parts) < 3:
                raise ValueError(f"policy line {lineno}: cannot parse {raw!r}")
            kind = parts[1].lower()
            if kind == "hash" and len(parts) == 3 and len(parts[2]) == 64:
                rules.append(PolicyRule(action, "hash", parts[2].lower()))
            elif kind == "name" and len(parts) == 3:
                rules.append(PolicyRule(action, "name", parts[2]))
            elif kind == "size" and len(parts) == 4 and parts[2] == ">":
                rules.append(PolicyRule(action, "size", int(parts[3])))
            else:
                raise ValueError(f"policy line {lineno}: cannot parse {raw!r}")
        return cls(rules)

    @classmethod
    def load(cls, path: Path) -> "Policy":
        return cls.parse(Path(path).read_text())


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    timestamp: float
    operator_id: str
    file_name: str
    content_hash: str
    decision: str
    reason: str

    def format_line(self) -> str:
        return "\t".join(
            [
                str(self.seq),
                f"{self.timestamp:.3f}",
                self.operator_id,
                self.file_name,
                self.content_hash,
                self.decision,
                self.reason,
            ]
        )


class Gatekeeper:
    def __init__(
        self,
        policy: Policy,
        audit_path: Optional[Path] = None,
        clock: Callable[[], float] = time.time,
    ):
        self.policy = policy
        self._operators: dict[str, str] = {}  # id -> sha256(secret)
        self._audit_path = Path(audit_path) if audit_path else None
        self._clock = clock
        self.audit_log: list[AuditRecord] = []

    def register_operator(self, operator_id: str, secret: str) -> None:
        self._operators[operator_id] = hashlib.sha256(secret.encode()).hexdigest()

    def _audit(self, operator_id: str, file_name: str, data: bytes, decision: str, reason: str) -> None:
        record = AuditRecord(
            seq=len(self.audit_log) + 1,
            timestamp=self._clock(),
            operator_id=operator_id,
            file_name=file_name,
            content_hash=hashlib.sha256(data).hexdigest() if data else "-",
            decision=decision,
            reason=reason,
        )
        self.audit_log.append(record)
        if self._audit_path:
            with open(self._audit_path, "a") as fh:
                fh.write(record.format_line() + "\n")

    def authenticate_operator(self, operator_id: str, secret: str) -> str:
        digest = hashlib.sha256(secret.encode()).hexdigest()
        if self._operators.get(operator_id) != digest:
            self._audit(operator_id, "-", b"", "DENY", "bad-credentials")
            raise AuthDenied(f"operator {operator_id!r} rejected")
        return operator_id

    def transfer(
        self,
        operator_id: str,
        file_name: str,
        data: bytes,
        session: Optional[IntegritySession],
    ) -> None:
        """Policy-check `data` and, if allowed, append it to the target's
        packed archive.  Exactly one audit record per call."""
        if operator_id not in self._operators:
            self._audit(operator_id, file_name, data, "DENY", "unknown-operator")
            raise TransferRejected(REJECT_POLICY, "unknown operator")
        decision, reason = self.policy.evaluate(file_name, data)
        if decision != "ALLOW":
            self._audit(operator_id, file_name, data, "DENY", reason)
            raise TransferRejected(REJECT_POLICY, reason)
        if session is None:
            self._audit(operator_id, file_name, data, "DENY", REJECT_SESSION)
            raise TransferRejected(REJECT_SESSION, "target refused authorization")
        try:
            files = read_archive(session)
            files.append((file_name, data))
            write_archive(session, files)
        except (TamperDetectedError, BlockedError, InhibitedError, RuntimeError) as e:
            self._audit(operator_id, file_name, data, "DENY", REJECT_SESSION)
            raise TransferRejected(REJECT_SESSION, str(e)) from e
        self._audit(operator_id, file_name, data, "ALLOW", reason)


# -- packed archive on the secure partition ---------------------------------

_COUNT = struct.Struct("<I")
_NAME_LEN = struct.Struct("<H")
_DATA_LEN = struct.Struct("<Q")


def pack_archive(files: list[tuple[str, bytes]]) -> bytes:
    out = [_COUNT.pack(len(files))]
    for name, data in files:
        raw_name = name.encode()
        out.append(_NAME_LEN.pack(len(raw_name)))
        out.append(raw_name)
        out.append(_DATA_LEN.pack(len(data)))
        out.append(data)
    return b"".join(out)


def unpack_archive(raw: bytes) -> list[tuple[str, bytes]]:
    (count,) = _COUNT.unpack_from(raw, 0)
    off = _COUNT.size
    files = []
    for _ in range(count):
        (name_len,) = _NAME_LEN.unpack_from(raw, off)
        off += _NAME_LEN.size
        if off + name_len > len(raw):
            raise IndexError("truncated archive name")
        name = raw[off : off + name_len].decode()
        off += name_len
        (data_len,) = _DATA_LEN.unpack_from(raw, off)
        off += _DATA_LEN.size
        if off + data_len > len(raw):
            raise IndexError("truncated archive payload")
        files.append((name, raw[off : off + data_len]))
        off += data_len
    return files


def write_archive(session: IntegritySession, files: list[tuple[str, bytes]]) -> None:
    raw = pack_archive(files)
    block = session.image.block_size
    blocks_needed = -(-len(raw) // block)
    if blocks_needed > session.visible_blocks:
        raise ValueError("archive does not fit the secure partition")
    raw = raw.ljust(blocks_needed * block, b"\x00")
    for i in range(blocks_needed):
        session.protected_write(i, raw[i * block : (i + 1) * block])
    session.flush()


def read_archive(session: IntegritySession) -> list[tuple[str, bytes]]:
    """Read the packed archive back through verified reads."""
    block = session.image.block_size
    first = session.protected_read(0)
    (count,) = _COUNT.unpack_from(first, 0)
    if count == 0:
        return []
    buf = bytearray(first)
    # pull blocks until the archive parses; entries are length-prefixed so
    # a short buffer shows up as a struct error or truncated payload
    next_block = 1
    while True:
        try:
            files = unpack_archive(bytes(buf))
            return files
        except (struct.error, IndexError):
            if next_block >= session.visible_blocks:
                raise ValueError("corrupt archive: ran past the partition")
            buf.extend(session.protected_read(next_block))
            next_block += 1
