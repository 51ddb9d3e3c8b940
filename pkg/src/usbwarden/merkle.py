"""Complete binary Merkle hash tree over equal-sized blocks.

The tree is kept as a flat array of 2n-1 digests for n leaves (n a power
of two): node 0 is the root, node v has children 2v+1 (left) and 2v+2
(right), and the leaf for block i sits at index (n-1)+i.  Only digests are
stored; the shape is implied by the numbering.

Hashing is SHA-256 with domain separation so a leaf can never be confused
with an internal node:

    leaf     = H(0x00 || block)
    internal = H(0x01 || left || right)

Proofs list the sibling digest at each level from the leaf up, each tagged
with the side it occupies, which makes the serialized form canonical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

DIGEST_SIZE = 32

_LEAF_PREFIX = b"\x00"
_NODE_PREFIX = b"\x01"


def leaf_hash(block: bytes) -> bytes:
    return hashlib.sha256(_LEAF_PREFIX + block).digest()


def internal_hash(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(_NODE_PREFIX + left + right).digest()


def is_power_of_two(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def next_power_of_two(x: int) -> int:
    if x < 1:
        raise ValueError("need a positive count")
    return 1 << (x - 1).bit_length()


@dataclass(frozen=True)
class ProofNode:
    """One sibling on the leaf-to-root path; is_left tells which child it is."""

    digest: bytes
    is_left: bool


@dataclass(frozen=True)
class IntegrityProof:
    leaf_index: int
    siblings: tuple[ProofNode, ...]


class MerkleTree:
    """Mutable tree with O(log n) proofs and updates.

    Safe for any number of concurrent readers; callers must serialize
    updates.  ``node_reads``/``node_writes`` count accesses to node slots
    and exist so callers can assert the logarithmic access bound.
    """

    __slots__ = ("n", "depth", "_nodes", "node_reads", "node_writes")

    def __init__(self, nodes: list[bytes], n: int):
        if len(nodes) != 2 * n - 1:
            raise ValueError(f"expected {2 * n - 1} nodes for n={n}, got {len(nodes)}")
        self.n = n
        self.depth = n.bit_length() - 1
        self._nodes = nodes
        self.node_reads = 0
        self.node_writes = 0

    @classmethod
    def build(cls, blocks: Sequence[bytes]) -> "MerkleTree":
        """Build from n byte-blocks; n must be a power of two, blocks equal size."""
        n = len(blocks)
        if not is_power_of_two(n):
            raise ValueError(f"block count must be a power of two, got {n}")
        sizes = {len(b) for b in blocks}
        if len(sizes) > 1:
            raise ValueError(f"blocks must all be the same size, got sizes {sorted(sizes)}")
        nodes: list[bytes] = [b""] * (2 * n - 1)
        for i, block in enumerate(blocks):
            nodes[n - 1 + i] = leaf_hash(block)
        for v in range(n - 2, -1, -1):
            nodes[v] = internal_hash(nodes[2 * v + 1], nodes[2 * v + 2])
        return cls(nodes, n)

    @classmethod
    def from_nodes(cls, nodes: Sequence[bytes]) -> "MerkleTree":
        """Adopt a stored node array.  Shape is validated, hashes are not;
        call validate_structure() to check internal consistency."""
        m = len(nodes)
        n = (m + 1) // 2
        if m != 2 * n - 1 or not is_power_of_two(n):
            raise ValueError(f"node count {m} is not 2n-1 for a power-of-two n")
        for d in nodes:
            if len(d) != DIGEST_SIZE:
                raise ValueError("node digests must be 32 bytes")
        return cls(list(nodes), n)

    @property
    def root(self) -> bytes:
        return self._nodes[0]

    def node(self, index: int) -> bytes:
        return self._nodes[index]

    def nodes(self) -> list[bytes]:
        return list(self._nodes)

    def reset_counters(self) -> None:
        self.node_reads = 0
        self.node_writes = 0

    def leaf_slot(self, index: int) -> int:
        if not 0 <= index < self.n:
            raise IndexError(f"leaf index {index} out of range for n={self.n}")
        return self.n - 1 + index

    def path_indices(self, index: int) -> list[int]:
        """Node slots on the leaf-to-root path, leaf first.  These are
        exactly the slots update() writes."""
        v = self.leaf_slot(index)
        path = [v]
        while v > 0:
            v = (v - 1) // 2
            path.append(v)
        return path

    def prove(self, index: int) -> IntegrityProof:
        """Inclusion proof for block `index`: log2(n) tagged siblings, bottom-up."""
        v = self.leaf_slot(index)
        siblings: list[ProofNode] = []
        while v > 0:
            sib = v + 1 if v % 2 == 1 else v - 1
            self.node_reads += 1
            siblings.append(ProofNode(self._nodes[sib], is_left=(sib % 2 == 1)))
            v = (v - 1) // 2
        return IntegrityProof(index, tuple(siblings))

    def update(self, index: int, new_block: bytes) -> bytes:
        """Replace block `index` and return the new root.

        Writes exactly log2(n)+1 node slots (the leaf-to-root path) and
        reads the log2(n) siblings needed to recompute it.
        """
        v = self.leaf_slot(index)
        self._nodes[v] = leaf_hash(new_block)
        self.node_writes += 1
        while v > 0:
            sib = v + 1 if v % 2 == 1 else v - 1
            self.node_reads += 1
            parent = (v - 1) // 2
            if v % 2 == 1:
                self._nodes[parent] = internal_hash(self._nodes[v], self._nodes[sib])
            else:
                self._nodes[parent] = internal_hash(self._nodes[sib], self._nodes[v])
            self.node_writes += 1
            v = parent
        return self._nodes[0]

    def update_from_proof(self, index: int, new_block: bytes, proof: IntegrityProof) -> bytes:
        """Like update(), but reuses an already-fetched proof's siblings so
        the whole write costs log2(n)+1 node writes and no node reads.

        The proof must be fresh (its siblings must equal the current node
        values); callers that just generated it with prove() satisfy this.
        """
        if proof.leaf_index != index or len(proof.siblings) != self.depth:
            raise ValueError("proof does not match this tree and leaf")
        v = self.leaf_slot(index)
        acc = leaf_hash(new_block)
        self._nodes[v] = acc
        self.node_writes += 1
        for step in proof.siblings:
            v = (v - 1) // 2
            acc = internal_hash(step.digest, acc) if step.is_left else internal_hash(acc, step.digest)
            self._nodes[v] = acc
            self.node_writes += 1
        return acc

    def validate_structure(self) -> bool:
        """True iff every internal node equals the hash of its children."""
        for v in range(self.n - 1):
            if self._nodes[v] != internal_hash(self._nodes[2 * v + 1], self._nodes[2 * v + 2]):
                return False
        return True


def verify(root: bytes, index: int, block: bytes, proof: IntegrityProof) -> bool:
    """Check that `block` is the content of leaf `index` under `root`.

    Returns False on any digest mismatch.  Structurally malformed proofs
    (wrong digest sizes, index/tag disagreement, index outside the tree
    implied by the path length) are rejected with ValueError.
    """
    if proof.leaf_index != index:
        raise ValueError("proof is for a different leaf index")
    if index < 0 or index >= (1 << len(proof.siblings)):
        raise ValueError("leaf index does not fit the proof path length")
    for step in proof.siblings:
        if len(step.digest) != DIGEST_SIZE:
            raise ValueError("proof sibling digests must be 32 bytes")
    acc = leaf_hash(block)
    for level, step in enumerate(proof.siblings):
        # index bit at this level says which child we are; the sibling must
        # sit on the other side or the proof is inconsistent.
        we_are_left = ((index >> level) & 1) == 0
        if step.is_left == we_are_left:
            raise ValueError("proof sibling side disagrees with leaf index")
        if step.is_left:
            acc = internal_hash(step.digest, acc)
        else:
            acc = internal_hash(acc, step.digest)
    return acc == root
