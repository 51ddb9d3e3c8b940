"""File-backed removable-storage images.

On-disk layout (all integers little-endian, full byte maps in
docs/FORMATS.md):

    block 0:        image header (64 bytes) + partition table (64 bytes),
                    rest of the block zero
    blocks 1..:     partitions, addressed by absolute block number

The authenticated partition holds a 64-byte geometry header, the (2n-1)
tree node digests, a 96-byte signature slot (root || Ed25519 signature)
and a 256-byte last-writer-certificate slot.  The secure partition is
shift zeroed blocks followed by n tree-leaf blocks; hosts may address the
first `visible` of those leaves, the rest is power-of-two padding pinned
to zero.

The signed message is not the bare root but a state digest that also binds
the image id and the geometry (n, block size, shift, visible), so no
header field can be altered without invalidating the signature.

raw_read/raw_write model what a regular, unmediated machine can do to the
device: byte access with no checks and no tree maintenance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path
from typing import BinaryIO, Optional

from .merkle import MerkleTree, is_power_of_two, next_power_of_two
from .pki import CERT_MAGIC, Certificate, DeviceIdentity, RootSignature

IMAGE_MAGIC = b"RSDI"
IMAGE_VERSION = 1
IMAGE_HEADER_SIZE = 64
TABLE_OFFSET = 64
TABLE_SIZE = 64
RSD_ID_SIZE = 32

ADS_MAGIC = b"UCAP"
ADS_VERSION = 1
ADS_HEADER_SIZE = 64
SIGNATURE_SLOT_SIZE = 96
CERT_SLOT_SIZE = 256

PT_EMPTY = 0
PT_SECURE = 1
PT_ADS = 2
PT_PLAIN = 3

ALLOWED_BLOCK_SIZES = (512, 4096)

_IMAGE_HEADER = struct.Struct("<4sHIQ32s")
_TABLE_ENTRY = struct.Struct("<B3xII")
_ADS_HEADER = struct.Struct("<4sHQIIQ")

_STATE_CONTEXT = b"uw-state:"


class NotAuthorized(Exception):
    """The image failed the pre-session structural checks."""

    MALFORMED_TABLE = "malformed-table"
    MISSING_PARTITION = "missing-partition"
    BAD_ADS_FORMAT = "bad-ads-format"
    SIZE_MISMATCH = "size-mismatch"

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class PartitionEntry:
    kind: int
    start_block: int
    block_count: int


@dataclass(frozen=True)
class PartitionTable:
    entries: tuple[PartitionEntry, ...]

    def pack(self) -> bytes:
        if len(self.entries) > 4:
            raise ValueError("at most 4 partition entries")
        raw = b"".join(
            _TABLE_ENTRY.pack(e.kind, e.start_block, e.block_count) for e in self.entries
        )
        raw += _TABLE_ENTRY.pack(PT_EMPTY, 0, 0) * (4 - len(self.entries))
        return raw.ljust(TABLE_SIZE, b"\x00")

    @classmethod
    def unpack(cls, raw: bytes) -> "PartitionTable":
        if len(raw) != TABLE_SIZE:
            raise ValueError("partition table must be 64 bytes")
        if any(raw[4 * _TABLE_ENTRY.size :][i] for i in range(TABLE_SIZE - 4 * _TABLE_ENTRY.size)):
            raise ValueError("reserved table bytes must be zero")
        entries = []
        for i in range(4):
            chunk = raw[i * _TABLE_ENTRY.size : (i + 1) * _TABLE_ENTRY.size]
            kind, start, count = _TABLE_ENTRY.unpack(chunk)
            # struct '<B3xII' ignores the pad bytes on unpack; reject dirt there
            if chunk[1:4] != b"\x00\x00\x00":
                raise ValueError("partition entry padding must be zero")
            if kind == PT_EMPTY:
                if start or count:
                    raise ValueError("empty entries must be all-zero")
                continue
            if kind not in (PT_SECURE, PT_ADS, PT_PLAIN):
                raise ValueError(f"unknown partition type {kind}")
            entries.append(PartitionEntry(kind, start, count))
        return cls(tuple(entries))

    def validate(self, total_blocks: int, reserved_blocks: int = 1) -> None:
        spans = []
        kinds = [e.kind for e in self.entries]
        if kinds.count(PT_SECURE) > 1 or kinds.count(PT_ADS) > 1:
            raise ValueError("duplicate secure or ads partition")
        for e in self.entries:
            if e.block_count < 1:
                raise ValueError("partition with zero blocks")
            if e.start_block < reserved_blocks or e.start_block + e.block_count > total_blocks:
                raise ValueError("partition outside device bounds")
            spans.append((e.start_block, e.start_block + e.block_count))
        spans.sort()
        for (_, end), (start, _) in zip(spans, spans[1:]):
            if start < end:
                raise ValueError("overlapping partitions")

    def find(self, kind: int) -> Optional[PartitionEntry]:
        for e in self.entries:
            if e.kind == kind:
                return e
        return None


@dataclass(frozen=True)
class AdsGeometry:
    """Parsed authenticated-partition header."""

    n: int
    block_size: int
    shift: int
    visible: int

    def pack(self) -> bytes:
        raw = _ADS_HEADER.pack(
            ADS_MAGIC, ADS_VERSION, self.n, self.block_size, self.shift, self.visible
        )
        return raw.ljust(ADS_HEADER_SIZE, b"\x00")

    @classmethod
    def unpack(cls, raw: bytes) -> "AdsGeometry":
        if len(raw) != ADS_HEADER_SIZE:
            raise ValueError("ads header must be 64 bytes")
        magic, version, n, block_size, shift, visible = _ADS_HEADER.unpack_from(raw)
        if magic != ADS_MAGIC:
            raise ValueError("bad ads magic")
        if version != ADS_VERSION:
            raise ValueError(f"unsupported ads format version {version}")
        if any(raw[_ADS_HEADER.size :]):
            raise ValueError("reserved ads header bytes must be zero")
        if not is_power_of_two(n):
            raise ValueError("leaf count must be a power of two")
        if shift < 1:
            raise ValueError("secure content shift must be at least 1 block")
        if visible < 1:
            raise ValueError("visible block count must be positive")
        return cls(n, block_size, shift, visible)

    @property
    def nodes_size(self) -> int:
        return (2 * self.n - 1) * 32

    @property
    def signature_offset(self) -> int:
        return ADS_HEADER_SIZE + self.nodes_size

    @property
    def cert_offset(self) -> int:
        return self.signature_offset + SIGNATURE_SLOT_SIZE

    @property
    def total_bytes(self) -> int:
        return self.cert_offset + CERT_SLOT_SIZE

    def blocks_needed(self) -> int:
        return -(-self.total_bytes // self.block_size)


class _MemoryStore:
    def __init__(self, buf: bytearray):
        self._buf = buf

    def size(self) -> int:
        return len(self._buf)

    def read(self, offset: int, size: int) -> bytes:
        return bytes(self._buf[offset : offset + size])

    def write(self, offset: int, data: bytes) -> None:
        self._buf[offset : offset + len(data)] = data

    def dump(self) -> bytes:
        return bytes(self._buf)

    def load(self, raw: bytes) -> None:
        self._buf[:] = raw

    def close(self) -> None:
        pass


class _FileStore:
    def __init__(self, fh: BinaryIO, path: Path):
        self._fh = fh
        self.path = path

    def size(self) -> int:
        self._fh.seek(0, 2)
        return self._fh.tell()

    def read(self, offset: int, size: int) -> bytes:
        self._fh.seek(offset)
        data = self._fh.read(size)
        if len(data) < size:
            data += b"\x00" * (size - len(data))  # sparse tail reads as zeros
        return data

    def write(self, offset: int, data: bytes) -> None:
        self._fh.seek(offset)
        self._fh.write(data)
        self._fh.flush()

    def dump(self) -> bytes:
        return self.read(0, self.size())

    def load(self, raw: bytes) -> None:
        self._fh.seek(0)
        self._fh.write(raw)
        self._fh.truncate(len(raw))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class RsdImage:
    """A removable-storage image: header block plus partitions."""

    def __init__(self, store, block_size: int, total_blocks: int, rsd_id: str):
        self._store = store
        self.block_size = block_size
        self.total_blocks = total_blocks
        self.rsd_id = rsd_id

    @property
    def header_blocks(self) -> int:
        """Blocks reserved at the front for the image header and table."""
        return -(-(IMAGE_HEADER_SIZE + TABLE_SIZE) // self.block_size)

    # -- construction ----------------------------------------------------

    @classmethod
    def create(cls, path: Optional[Path], block_size: int, total_blocks: int, rsd_id: str) -> "RsdImage":
        rid = rsd_id.encode()
        if not rid or len(rid) > RSD_ID_SIZE:
            raise ValueError("rsd id must be 1..32 bytes")
        if block_size < 32:
            raise ValueError("block size must be at least 32 bytes")
        size = block_size * total_blocks
        if path is None:
            store = _MemoryStore(bytearray(size))
        else:
            path = Path(path)
            with open(path, "wb") as fh:
                fh.truncate(size)
            store = _FileStore(open(path, "r+b"), path)
        header = _IMAGE_HEADER.pack(
            IMAGE_MAGIC, IMAGE_VERSION, block_size, total_blocks, rid.ljust(RSD_ID_SIZE, b"\x00")
        ).ljust(IMAGE_HEADER_SIZE, b"\x00")
        store.write(0, header)
        return cls(store, block_size, total_blocks, rsd_id)

    @classmethod
    def open(cls, path: Path) -> "RsdImage":
        store = _FileStore(open(path, "r+b"), Path(path))
        return cls._from_store(store)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RsdImage":
        return cls._from_store(_MemoryStore(bytearray(raw)))

    @classmethod
    def _from_store(cls, store) -> "RsdImage":
        raw = store.read(0, IMAGE_HEADER_SIZE)
        magic, version, block_size, total_blocks, rid = _IMAGE_HEADER.unpack_from(raw)
        if magic != IMAGE_MAGIC:
            raise ValueError("not an rsd image (bad magic)")
        if version != IMAGE_VERSION:
            raise ValueError(f"unsupported image version {version}")
        if any(raw[_IMAGE_HEADER.size :]):
            raise ValueError("reserved image header bytes must be zero")
        if block_size <= 0 or total_blocks <= 0:
            raise ValueError("bad image geometry")
        if store.size() != block_size * total_blocks:
            raise ValueError("image file size does not match its header")
        return cls(store, block_size, total_blocks, rid.rstrip(b"\x00").decode())

    # -- raw block access (what a regular machine can do) -----------------

    def _check_block(self, block: int) -> None:
        if not 0 <= block < self.total_blocks:
            raise IndexError(f"physical block {block} out of range")

    def raw_read(self, block: int) -> bytes:
        self._check_block(block)
        return self._store.read(block * self.block_size, self.block_size)

    def raw_write(self, block: int, data: bytes) -> None:
        self._check_block(block)
        if len(data) != self.block_size:
            raise ValueError("raw writes must be exactly one block")
        self._store.write(block * self.block_size, data)

    # -- byte-level access used by the layout code ------------------------

    def read_at(self, offset: int, size: int) -> bytes:
        return self._store.read(offset, size)

    def write_at(self, offset: int, data: bytes) -> None:
        self._store.write(offset, data)

    # -- whole-image snapshots (rollback experiments) ----------------------

    def snapshot(self) -> bytes:
        return self._store.dump()

    def restore(self, raw: bytes) -> None:
        self._store.load(raw)

    def read_table(self) -> PartitionTable:
        return PartitionTable.unpack(self.read_at(TABLE_OFFSET, TABLE_SIZE))

    def write_table(self, table: PartitionTable) -> None:
        self.write_at(TABLE_OFFSET, table.pack())

    def close(self) -> None:
        self._store.close()


def state_digest(rsd_id: str, geometry: AdsGeometry, root: bytes) -> bytes:
    """Digest actually signed for an image: binds the root to the image id
    and the layout geometry so neither can be swapped independently."""
    rid = rsd_id.encode().ljust(RSD_ID_SIZE, b"\x00")
    geo = struct.pack("<QIIQ", geometry.n, geometry.block_size, geometry.shift, geometry.visible)
    return sha256(_STATE_CONTEXT + rid + geo + root).digest()


class AuthorizedLayout:
    """Accessor handle returned once an image passed authorization."""

    def __init__(self, image: RsdImage, table: PartitionTable, geometry: AdsGeometry):
        self.image = image
        self.table = table
        self.geometry = geometry
        self.secure = table.find(PT_SECURE)
        self.ads = table.find(PT_ADS)

    @property
    def n(self) -> int:
        return self.geometry.n

    @property
    def visible(self) -> int:
        return self.geometry.visible

    def _ads_offset(self, rel: int) -> int:
        return self.ads.start_block * self.image.block_size + rel

    def leaf_block_number(self, leaf: int) -> int:
        """Physical block holding tree leaf `leaf` (shift translation applied)."""
        if not 0 <= leaf < self.n:
            raise IndexError(f"leaf {leaf} out of range")
        return self.secure.start_block + self.geometry.shift + leaf

    def read_leaf(self, leaf: int) -> bytes:
        return self.image.raw_read(self.leaf_block_number(leaf))

    def write_leaf(self, leaf: int, data: bytes) -> None:
        self.image.raw_write(self.leaf_block_number(leaf), data)

    def read_nodes(self) -> list[bytes]:
        raw = self.image.read_at(self._ads_offset(ADS_HEADER_SIZE), self.geometry.nodes_size)
        return [raw[i : i + 32] for i in range(0, len(raw), 32)]

    def write_nodes(self, nodes: list[bytes]) -> None:
        if len(nodes) != 2 * self.n - 1:
            raise ValueError("wrong node count")
        self.image.write_at(self._ads_offset(ADS_HEADER_SIZE), b"".join(nodes))

    def write_node(self, index: int, digest: bytes) -> None:
        if not 0 <= index < 2 * self.n - 1 or len(digest) != 32:
            raise ValueError("bad node write")
        self.image.write_at(self._ads_offset(ADS_HEADER_SIZE + 32 * index), digest)

    def read_signature(self) -> RootSignature:
        raw = self.image.read_at(self._ads_offset(self.geometry.signature_offset), SIGNATURE_SLOT_SIZE)
        return RootSignature.from_bytes(raw)

    def write_signature(self, rs: RootSignature) -> None:
        self.image.write_at(self._ads_offset(self.geometry.signature_offset), rs.to_bytes())

    def read_certificate(self) -> Certificate:
        raw = self.image.read_at(self._ads_offset(self.geometry.cert_offset), CERT_SLOT_SIZE)
        if raw[:4] != CERT_MAGIC:
            raise ValueError("bad certificate magic")
        subject_len = raw[5]
        need = 6 + subject_len + 32 + 8 + 64
        if need > CERT_SLOT_SIZE:
            raise ValueError("certificate overruns its slot")
        cert = Certificate.from_bytes(raw[:need])
        if any(raw[need:]):
            raise ValueError("certificate slot padding must be zero")
        return cert

    def write_certificate(self, cert: Certificate) -> None:
        raw = cert.to_bytes()
        if len(raw) > CERT_SLOT_SIZE:
            raise ValueError("certificate too large for its slot")
        self.image.write_at(self._ads_offset(self.geometry.cert_offset), raw.ljust(CERT_SLOT_SIZE, b"\x00"))

    def state_digest(self, root: bytes) -> bytes:
        return state_digest(self.image.rsd_id, self.geometry, root)


def authorize_rsd(image: RsdImage) -> AuthorizedLayout:
    """Structural authorization of an image before any mediated I/O.

    Checks, in order: partition table well-formedness, presence of both
    the secure and the authenticated partition, header sanity of the
    authenticated partition, and size consistency between the two.
    Raises NotAuthorized with a reason on the first failed check.
    """
    try:
        table = image.read_table()
        table.validate(image.total_blocks, image.header_blocks)
    except ValueError as e:
        raise NotAuthorized(NotAuthorized.MALFORMED_TABLE, str(e)) from e

    secure = table.find(PT_SECURE)
    ads = table.find(PT_ADS)
    if secure is None or ads is None:
        raise NotAuthorized(
            NotAuthorized.MISSING_PARTITION,
            "secure" if secure is None else "ads",
        )

    try:
        raw = image.read_at(ads.start_block * image.block_size, ADS_HEADER_SIZE)
        geometry = AdsGeometry.unpack(raw)
    except ValueError as e:
        raise NotAuthorized(NotAuthorized.BAD_ADS_FORMAT, str(e)) from e
    if geometry.block_size != image.block_size:
        raise NotAuthorized(NotAuthorized.BAD_ADS_FORMAT, "block size disagrees with image")

    if geometry.visible > geometry.n or next_power_of_two(geometry.visible) != geometry.n:
        raise NotAuthorized(NotAuthorized.SIZE_MISMATCH, "visible count does not match leaf count")
    if secure.block_count != geometry.shift + geometry.n:
        raise NotAuthorized(NotAuthorized.SIZE_MISMATCH, "secure partition size does not match geometry")
    if ads.block_count != geometry.blocks_needed():
        raise NotAuthorized(NotAuthorized.SIZE_MISMATCH, "ads partition size does not match geometry")

    return AuthorizedLayout(image, table, geometry)


def write_blank_image(
    path: Optional[Path],
    *,
    secure_blocks: int,
    block_size: int,
    rsd_id: str,
    formatter: DeviceIdentity,
    shift: int = 1,
    device_blocks: Optional[int] = None,
) -> RsdImage:
    """Lay out an empty image: zeroed secure partition, tree over all-zero
    blocks, signature and certificate slots filled by `formatter`.

    No block-size policy is applied here; format_image() is the checked
    front door.  Output is deterministic for fixed arguments.
    """
    if secure_blocks < 1:
        raise ValueError("need at least one secure block")
    if shift < 1:
        raise ValueError("shift must be at least 1 block")
    n = next_power_of_two(secure_blocks)
    geometry = AdsGeometry(n=n, block_size=block_size, shift=shift, visible=secure_blocks)
    secure_count = shift + n
    ads_count = geometry.blocks_needed()
    header_blocks = -(-(IMAGE_HEADER_SIZE + TABLE_SIZE) // block_size)
    needed = header_blocks + secure_count + ads_count
    if device_blocks is None:
        total = needed
    else:
        if device_blocks < needed:
            raise ValueError(f"image capacity insufficient: need {needed} blocks, have {device_blocks}")
        total = device_blocks

    image = RsdImage.create(path, block_size, total, rsd_id)
    entries = [
        PartitionEntry(PT_SECURE, header_blocks, secure_count),
        PartitionEntry(PT_ADS, header_blocks + secure_count, ads_count),
    ]
    if total > needed:
        entries.append(PartitionEntry(PT_PLAIN, needed, total - needed))
    image.write_table(PartitionTable(tuple(entries)))

    tree = MerkleTree.build([bytes(block_size)] * n)
    layout = AuthorizedLayout(image, image.read_table(), geometry)
    image.write_at(entries[1].start_block * block_size, geometry.pack())
    layout.write_nodes(tree.nodes())
    bound = formatter.sign_root(layout.state_digest(tree.root))
    layout.write_signature(RootSignature(tree.root, bound.signature))
    layout.write_certificate(formatter.certificate)
    return image


def format_image(
    path: Optional[Path],
    *,
    secure_blocks: int,
    block_size: int,
    rsd_id: str,
    formatter: DeviceIdentity,
    shift: int = 1,
    device_blocks: Optional[int] = None,
) -> RsdImage:
    """Create an empty, immediately-authorizable image.

    Block size is restricted to the sizes real devices use; everything
    else is delegated to write_blank_image().
    """
    if block_size not in ALLOWED_BLOCK_SIZES:
        raise ValueError(f"block size must be one of {ALLOWED_BLOCK_SIZES}")
    return write_blank_image(
        path,
        secure_blocks=secure_blocks,
        block_size=block_size,
        rsd_id=rsd_id,
        formatter=formatter,
        shift=shift,
        device_blocks=device_blocks,
    )
