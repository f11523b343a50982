"""Certificates of Existence for smart meters.

A meter generates a batch of one-time leaf keys, commits to them with a
Merkle root and has a peer meter sign that root. The peer's factory key is
itself certified by the manufacturer, which acts as the CA. Anyone holding
the manufacturer public key can then check that an ERC signing key belongs
to a genuine meter without learning which meter it is.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from spb_energy.core.codec import encode_fields
from spb_energy.core.constants import DEFAULT_MERKLE_LEAVES
from spb_energy.core.crypto import (
    Hash,
    KeyPair,
    PublicKey,
    Signature,
    digest,
    generate_keypair,
    sign,
    verify,
)
from spb_energy.core.exceptions import EmptyTree, ExhaustedKeys, UncertifiedSigner
from spb_energy.core.merkle import (
    MerkleProof,
    MerkleTree,
    build_merkle_tree,
    membership_proof,
    verify_membership,
)

logger = logging.getLogger(__name__)

_FACTORY_TAG = "coe-factory"
_ROOT_TAG = "coe-root"


def factory_message(factory_pk: bytes) -> bytes:
    return encode_fields([_FACTORY_TAG, factory_pk])


def root_message(root: bytes) -> bytes:
    return encode_fields([_ROOT_TAG, root])


@dataclass(frozen=True)
class Manufacturer:
    """The meter manufacturer, acting as CA for every factory key."""

    keypair: KeyPair

    @property
    def public_key(self) -> PublicKey:
        return self.keypair.public_key

    def certify(self, factory_pk: bytes) -> Signature:
        return sign(factory_message(factory_pk), self.keypair.secret_key)


@dataclass(frozen=True)
class CoECertificate:
    root: Hash
    signer_pk: PublicKey
    signer_sig: Signature
    manufacturer_cert: Signature

    def encode(self) -> bytes:
        return encode_certificate(self)


@dataclass
class MeterIdentity:
    seed: bytes
    factory_keypair: KeyPair
    factory_cert: Optional[Signature]
    leaf_keypairs: List[KeyPair]
    tree: MerkleTree
    certificate: Optional[CoECertificate] = None
    next_leaf: int = 0
    generation: int = 0
    issued_pks: List[PublicKey] = field(default_factory=list)

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_keypairs)

    @property
    def remaining(self) -> int:
        return self.leaf_count - self.next_leaf


def _leaf_keypairs(seed: bytes, generation: int, leaf_count: int) -> List[KeyPair]:
    if leaf_count <= 0:
        raise EmptyTree("A meter needs at least one leaf key")
    return [
        generate_keypair(digest(encode_fields([seed, "leaf", generation, i])))
        for i in range(leaf_count)
    ]


def create_meter(
    seed: bytes,
    manufacturer: Optional[Manufacturer],
    leaf_count: int = DEFAULT_MERKLE_LEAVES,
) -> MeterIdentity:
    """Create a meter identity with its factory key and first leaf batch.

    The certificate is left empty until a peer meter signs the root
    (see ``issue_certificate`` and ``certify_meter``).

    Args:
        seed: 32-byte meter seed
        manufacturer: CA certifying the factory key, or None for a rogue device
        leaf_count: Number of one-time leaf keys per tree

    Returns
    -------
        Fresh MeterIdentity
    """
    factory_keypair = generate_keypair(digest(encode_fields([seed, "factory"])))
    factory_cert = (
        manufacturer.certify(factory_keypair.public_key) if manufacturer else None
    )
    leaves = _leaf_keypairs(seed, 0, leaf_count)
    return MeterIdentity(
        seed=bytes(seed),
        factory_keypair=factory_keypair,
        factory_cert=factory_cert,
        leaf_keypairs=leaves,
        tree=build_merkle_tree([kp.public_key for kp in leaves]),
    )


def issue_certificate(root: bytes, signer: MeterIdentity) -> CoECertificate:
    """Have ``signer`` countersign another meter's root.

    The signer signs unconditionally; it cannot check what the root covers.
    """
    if signer.factory_cert is None:
        raise UncertifiedSigner(
            f"Meter {signer.factory_keypair.public_key.hex()[:16]} has no factory certificate"
        )
    return CoECertificate(
        root=Hash(bytes(root)),
        signer_pk=signer.factory_keypair.public_key,
        signer_sig=sign(root_message(root), signer.factory_keypair.secret_key),
        manufacturer_cert=signer.factory_cert,
    )


def certify_meter(meter: MeterIdentity, signer: MeterIdentity) -> CoECertificate:
    """Attach a certificate for the meter's current tree."""
    meter.certificate = issue_certificate(meter.tree.root, signer)
    return meter.certificate


def verify_coe(
    cert: CoECertificate,
    pk: bytes,
    proof: MerkleProof,
    manufacturer_pk: bytes,
) -> bool:
    """Check the CA chain, the root signature and the leaf membership.

    Never raises; malformed inputs simply fail verification.
    """
    try:
        return (
            verify(factory_message(cert.signer_pk), cert.manufacturer_cert, manufacturer_pk)
            and verify(root_message(cert.root), cert.signer_sig, cert.signer_pk)
            and verify_membership(pk, proof, cert.root)
        )
    except (AttributeError, TypeError, ValueError):
        return False


def next_signing_key(meter: MeterIdentity) -> Tuple[KeyPair, MerkleProof]:
    """Hand out the next unused leaf key with its membership proof."""
    if meter.next_leaf >= meter.leaf_count:
        raise ExhaustedKeys(
            f"All {meter.leaf_count} leaf keys of generation {meter.generation} are used"
        )
    index = meter.next_leaf
    meter.next_leaf += 1
    keypair = meter.leaf_keypairs[index]
    meter.issued_pks.append(keypair.public_key)
    return keypair, membership_proof(meter.tree, index)


def rebuild_tree(meter: MeterIdentity, signer: MeterIdentity) -> MeterIdentity:
    """Replace exhausted leaf keys with a new batch and a new certificate."""
    meter.generation += 1
    meter.leaf_keypairs = _leaf_keypairs(meter.seed, meter.generation, meter.leaf_count)
    meter.tree = build_merkle_tree([kp.public_key for kp in meter.leaf_keypairs])
    meter.next_leaf = 0
    certify_meter(meter, signer)
    logger.info(
        "Meter rebuilt its key tree (generation %d, root %s)",
        meter.generation,
        meter.tree.root.hex()[:16],
    )
    return meter


def encode_certificate(cert: CoECertificate) -> bytes:
    """Canonical layout: root, signer_pk, signer_sig, manufacturer_cert."""
    return encode_fields(
        [cert.root, cert.signer_pk, cert.signer_sig, cert.manufacturer_cert]
    )


def encode_proof(proof: MerkleProof) -> bytes:
    return proof.encode()
