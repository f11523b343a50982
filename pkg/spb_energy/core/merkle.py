"""Merkle trees over public keys with membership proofs.

Leaves are ``digest(pk)``. Internal nodes are ``digest(left + right)``; a level
with an odd number of nodes pairs its last node with itself. A one-leaf tree
is sealed with one extra hash so its root is never a bare leaf hash.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from spb_energy.core.codec import encode_fields
from spb_energy.core.crypto import Hash, digest
from spb_energy.core.exceptions import EmptyTree, LeafIndexOutOfRange


@dataclass(frozen=True)
class MerkleTree:
    leaves: Tuple[Hash, ...]
    levels: Tuple[Tuple[Hash, ...], ...]

    @property
    def root(self) -> Hash:
        return self.levels[-1][0]

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def __len__(self) -> int:
        return len(self.leaves)


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    # (sibling hash, sibling_is_left)
    siblings: Tuple[Tuple[Hash, bool], ...]

    def encode(self) -> bytes:
        fields = [self.leaf_index, len(self.siblings)]
        for sibling, is_left in self.siblings:
            fields.extend([sibling, is_left])
        return encode_fields(fields)


def _combine(left: bytes, right: bytes) -> Hash:
    return digest(left + right)


def build_merkle_tree(pks: Sequence[bytes]) -> MerkleTree:
    """Build a Merkle tree from an ordered list of public keys.

    Args:
        pks: Ordered, non-empty list of public keys

    Returns
    -------
        MerkleTree with every level from leaves to root
    """
    if not pks:
        raise EmptyTree("Cannot build a Merkle tree without leaves")
    leaves = tuple(digest(pk) for pk in pks)
    levels: List[Tuple[Hash, ...]] = [leaves]
    if len(leaves) == 1:
        levels.append((digest(leaves[0]),))
    level = leaves
    while len(level) > 1:
        parents = []
        for i in range(0, len(level), 2):
            left = level[i]
            right = level[i + 1] if i + 1 < len(level) else left
            parents.append(_combine(left, right))
        level = tuple(parents)
        levels.append(level)
    return MerkleTree(leaves=leaves, levels=tuple(levels))


def membership_proof(tree: MerkleTree, leaf_index: int) -> MerkleProof:
    """Collect the sibling path for a leaf."""
    if not 0 <= leaf_index < len(tree.leaves):
        raise LeafIndexOutOfRange(
            f"Leaf index {leaf_index} outside tree of {len(tree.leaves)} leaves"
        )
    if len(tree.leaves) == 1:
        return MerkleProof(leaf_index=0, siblings=())
    siblings = []
    index = leaf_index
    for level in tree.levels[:-1]:
        sibling = index ^ 1
        if sibling >= len(level):
            sibling = index
        siblings.append((level[sibling], sibling < index))
        index //= 2
    return MerkleProof(leaf_index=leaf_index, siblings=tuple(siblings))


def root_from_proof(pk: bytes, proof: MerkleProof) -> Hash:
    """Recompute the root implied by a public key and its proof."""
    node = digest(pk)
    if not proof.siblings:
        return digest(node)
    for sibling, is_left in proof.siblings:
        node = _combine(sibling, node) if is_left else _combine(node, sibling)
    return node


def _path_matches_index(proof: MerkleProof) -> bool:
    # Side flags are the bits of the leaf index, least significant first.
    if proof.leaf_index < 0 or proof.leaf_index >> len(proof.siblings):
        return False
    return all(
        is_left == bool((proof.leaf_index >> level) & 1)
        for level, (_, is_left) in enumerate(proof.siblings)
    )


def verify_membership(pk: bytes, proof: MerkleProof, root: bytes) -> bool:
    """Check that ``pk`` sits under ``root`` at ``proof.leaf_index``; never raises."""
    try:
        if not _path_matches_index(proof):
            return False
        return root_from_proof(pk, proof) == bytes(root)
    except (TypeError, ValueError):
        return False
