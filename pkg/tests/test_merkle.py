"""Test cases for Merkle trees and membership proofs."""

import unittest

from spb_energy.core.crypto import derive_seed, digest, generate_keypair
from spb_energy.core.exceptions import EmptyTree, LeafIndexOutOfRange
from spb_energy.core.merkle import (
    MerkleProof,
    build_merkle_tree,
    membership_proof,
    root_from_proof,
    verify_membership,
)


def make_pks(count, label="leaf"):
    return [generate_keypair(derive_seed(3, f"{label}-{i}")).public_key for i in range(count)]


class TestMerkleTree(unittest.TestCase):
    """Test cases for tree construction and proofs."""

    def test_every_leaf_verifies(self):
        """Test that every leaf of trees of several sizes proves membership."""
        for count in (1, 2, 3, 5, 8, 16):
            pks = make_pks(count)
            tree = build_merkle_tree(pks)
            for i, pk in enumerate(pks):
                proof = membership_proof(tree, i)
                self.assertTrue(verify_membership(pk, proof, tree.root), (count, i))

    def test_single_leaf_root(self):
        pk = make_pks(1)[0]
        tree = build_merkle_tree([pk])
        self.assertEqual(tree.root, digest(digest(pk)))
        self.assertEqual(membership_proof(tree, 0).siblings, ())

    def test_odd_level_duplicates_last_node(self):
        pks = make_pks(3)
        tree = build_merkle_tree(pks)
        leaves = [digest(pk) for pk in pks]
        left = digest(leaves[0] + leaves[1])
        right = digest(leaves[2] + leaves[2])
        self.assertEqual(tree.root, digest(left + right))

    def test_empty_tree_raises(self):
        with self.assertRaises(EmptyTree):
            build_merkle_tree([])

    def test_index_out_of_range_raises(self):
        tree = build_merkle_tree(make_pks(4))
        with self.assertRaises(LeafIndexOutOfRange):
            membership_proof(tree, 4)
        with self.assertRaises(LeafIndexOutOfRange):
            membership_proof(tree, -1)

    def test_outside_key_fails(self):
        tree = build_merkle_tree(make_pks(8))
        stranger = make_pks(1, "stranger")[0]
        self.assertFalse(verify_membership(stranger, membership_proof(tree, 0), tree.root))

    def test_proof_with_wrong_index_fails(self):
        """Test that a proof cannot be replayed at another position."""
        pks = make_pks(4)
        tree = build_merkle_tree(pks)
        proof = membership_proof(tree, 1)
        moved = MerkleProof(leaf_index=3, siblings=proof.siblings)
        self.assertFalse(verify_membership(pks[1], moved, tree.root))

    def test_proof_against_other_root_fails(self):
        pks = make_pks(4)
        tree = build_merkle_tree(pks)
        other = build_merkle_tree(make_pks(4, "other"))
        self.assertFalse(verify_membership(pks[0], membership_proof(tree, 0), other.root))

    def test_root_from_proof_matches_tree(self):
        pks = make_pks(5)
        tree = build_merkle_tree(pks)
        self.assertEqual(root_from_proof(pks[4], membership_proof(tree, 4)), tree.root)
        self.assertEqual(tree.depth, 3)
        self.assertEqual(len(tree), 5)

    def test_malformed_proof_returns_false(self):
        pk = make_pks(1)[0]
        self.assertFalse(verify_membership(pk, MerkleProof(leaf_index=-1, siblings=()), b""))


if __name__ == "__main__":
    unittest.main()
