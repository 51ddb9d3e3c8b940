"""Mediated block I/O on an authorized image.

A session opens with a verification chain (last-writer certificate against
the CA and revocation list, root signature against that certificate, node
array internal consistency against the stored root, then the coordination
service if one is configured).  Any failure blocks the device before a
single byte is served.

Reads verify an inclusion proof against the trusted root before data is
surfaced; writes pre-check the block being overwritten, then update the
in-memory tree.  Tree nodes, the signature and the last-writer certificate
are flushed lazily; flush() also pushes the new root to the coordination
service when one is attached.  flush(stop_after=...) exists purely to
reproduce torn-write states for crash experiments.
"""

from __future__ import annotations

from typing import Optional

from .cs import CsUnreachableError
from .image import AuthorizedLayout, NotAuthorized, RsdImage, authorize_rsd
from .merkle import MerkleTree, verify
from .pki import (
    Certificate,
    DeviceIdentity,
    RevocationList,
    verify_certificate,
    verify_root_signature,
)
from .pki import RootSignature

FLUSH_INTERVAL_MS = 500

CRASH_AFTER_DATA = "data"
CRASH_AFTER_NODES = "nodes"
CRASH_AFTER_SIGNATURE = "signature"
CRASH_POINTS = (CRASH_AFTER_DATA, CRASH_AFTER_NODES, CRASH_AFTER_SIGNATURE)


class BlockedError(Exception):
    """The verification chain failed; the device is refused outright."""

    BAD_CERTIFICATE = "bad-certificate"
    BAD_SIGNATURE = "bad-signature"
    ADS_INCONSISTENT = "ads-inconsistent"
    ROLLBACK_DETECTED = "rollback-detected"
    CS_UNREACHABLE = "cs-unreachable"

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class TamperDetectedError(Exception):
    """A block failed proof verification; its content is never returned."""

    def __init__(self, lba: int):
        self.lba = lba
        super().__init__(f"tamper detected at block {lba}")


class InhibitedError(Exception):
    """Host targeted a block outside the protected range."""


class OutOfRangeError(Exception):
    """Host targeted a block the device does not even have."""


class IntegritySession:
    def __init__(
        self,
        image: RsdImage,
        layout: AuthorizedLayout,
        tree: MerkleTree,
        identity: DeviceIdentity,
        cs_client=None,
    ):
        self.image = image
        self.layout = layout
        self.tree = tree
        self.identity = identity
        self.cs_client = cs_client
        self.flush_interval_ms = FLUSH_INTERVAL_MS
        self._trusted_root = tree.root
        self._dirty = False
        self._dirty_nodes: set[int] = set()
        self._cert_written = False
        self._closed = False
        self.last_node_reads = 0
        self.last_node_writes = 0

    # -- state -------------------------------------------------------------

    @property
    def trusted_root(self) -> bytes:
        return self._trusted_root

    @property
    def dirty(self) -> bool:
        return self._dirty

    @property
    def visible_blocks(self) -> int:
        return self.layout.visible

    def _check_open(self) -> None:
        if self._closed:
            raise RuntimeError("session is closed")

    def _check_lba(self, lba: int) -> None:
        if lba < 0 or lba >= self.image.total_blocks:
            raise OutOfRangeError(f"block {lba} beyond the device")
        if lba >= self.layout.visible:
            raise InhibitedError(f"block {lba} is outside the secure partition")

    # -- mediated I/O --------------------------------------------------------

    def protected_read(self, host_lba: int) -> bytes:
        """Read one block, verifying its proof against the trusted root."""
        self._check_open()
        self._check_lba(host_lba)
        self.tree.reset_counters()
        data = self.layout.read_leaf(host_lba)
        proof = self.tree.prove(host_lba)
        self.last_node_reads, self.last_node_writes = self.tree.node_reads, self.tree.node_writes
        if not verify(self._trusted_root, host_lba, data, proof):
            raise TamperDetectedError(host_lba)
        return data

    def protected_write(self, host_lba: int, data: bytes) -> None:
        """Write one block after pre-checking the block being replaced.

        The tree update reuses the pre-check proof siblings, so the whole
        operation touches log2(n) node reads and log2(n)+1 node writes.
        """
        self._check_open()
        self._check_lba(host_lba)
        if len(data) != self.image.block_size:
            raise ValueError("writes must be exactly one block")
        self.tree.reset_counters()
        old = self.layout.read_leaf(host_lba)
        proof = self.tree.prove(host_lba)
        if not verify(self._trusted_root, host_lba, old, proof):
            self.last_node_reads, self.last_node_writes = self.tree.node_reads, self.tree.node_writes
            raise TamperDetectedError(host_lba)
        self.layout.write_leaf(host_lba, data)
        self._trusted_root = self.tree.update_from_proof(host_lba, data, proof)
        self.last_node_reads, self.last_node_writes = self.tree.node_reads, self.tree.node_writes
        self._dirty_nodes.update(self.tree.path_indices(host_lba))
        self._dirty = True

    def flush(self, stop_after: Optional[str] = None) -> None:
        """Persist pending tree nodes, signature, certificate; then push the
        root to the coordination service.

        stop_after (one of CRASH_POINTS except "data") aborts mid-way and
        leaves the session unusable, simulating an abrupt unplug.
        """
        self._check_open()
        if stop_after not in (None, CRASH_AFTER_NODES, CRASH_AFTER_SIGNATURE):
            raise ValueError(f"unknown crash point {stop_after!r}")
        if not self._dirty:
            return
        for index in sorted(self._dirty_nodes):
            self.layout.write_node(index, self.tree.node(index))
        if stop_after == CRASH_AFTER_NODES:
            self._closed = True
            return
        digest = self.layout.state_digest(self._trusted_root)
        self.layout.write_signature(
            RootSignature(self._trusted_root, self.identity.sign_root(digest).signature)
        )
        if stop_after == CRASH_AFTER_SIGNATURE:
            self._closed = True
            return
        if not self._cert_written:
            stored = self.layout.read_certificate()
            if stored != self.identity.certificate:
                self.layout.write_certificate(self.identity.certificate)
            self._cert_written = True
        if self.cs_client is not None:
            self.cs_client.put_root(self.image.rsd_id, self._trusted_root)
        self._dirty_nodes.clear()
        self._dirty = False

    def close(self) -> None:
        if self._closed:
            return
        if self._dirty:
            self.flush()
        self._closed = True

    def abandon(self) -> None:
        """Drop the session without flushing (abrupt detach)."""
        self._closed = True


def init_session(
    image: RsdImage,
    identity: DeviceIdentity,
    ca_public_key: bytes,
    revocation_list: Optional[RevocationList] = None,
    cs_client=None,
) -> IntegritySession:
    """Run the full verification chain and return a live session.

    Raises NotAuthorized for structural problems and BlockedError when any
    cryptographic or coordination check fails.  A blocked image gets no
    session object, so no operation can ever run against it.
    """
    layout = authorize_rsd(image)

    try:
        cert = layout.read_certificate()
    except ValueError as e:
        raise BlockedError(BlockedError.BAD_CERTIFICATE, str(e)) from e
    if not verify_certificate(cert, ca_public_key, revocation_list):
        raise BlockedError(BlockedError.BAD_CERTIFICATE, f"serial {cert.serial}")

    try:
        stored_sig = layout.read_signature()
    except ValueError as e:
        raise BlockedError(BlockedError.BAD_SIGNATURE, str(e)) from e
    bound = RootSignature(layout.state_digest(stored_sig.root), stored_sig.signature)
    if not verify_root_signature(cert, bound):
        raise BlockedError(BlockedError.BAD_SIGNATURE)

    try:
        tree = MerkleTree.from_nodes(layout.read_nodes())
    except ValueError as e:
        raise BlockedError(BlockedError.ADS_INCONSISTENT, str(e)) from e
    if not tree.validate_structure() or tree.root != stored_sig.root:
        raise BlockedError(BlockedError.ADS_INCONSISTENT)

    if cs_client is not None:
        try:
            record = cs_client.get_root(image.rsd_id)
        except CsUnreachableError as e:
            raise BlockedError(BlockedError.CS_UNREACHABLE, str(e)) from e
        if record is not None and record.root != tree.root:
            raise BlockedError(BlockedError.ROLLBACK_DETECTED)

    return IntegritySession(image, layout, tree, identity, cs_client)
