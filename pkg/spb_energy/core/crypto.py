"""Key pairs, signatures, hashing and address derivation.

Ed25519 keys are derived from a 32-byte seed, so every key in a simulation is
reproducible from the experiment seed. Signatures are deterministic.
"""

import hashlib
from dataclasses import dataclass
from typing import NewType

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from spb_energy.core.constants import (
    ADDRESS_LENGTH,
    PUBLIC_KEY_LENGTH,
    SECRET_KEY_LENGTH,
    SEED_LENGTH,
)
from spb_energy.core.exceptions import MalformedKey

Hash = NewType("Hash", bytes)
Signature = NewType("Signature", bytes)
Address = NewType("Address", bytes)
PublicKey = NewType("PublicKey", bytes)


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    secret_key: bytes

    @property
    def address(self) -> Address:
        return derive_address(self.public_key)

    def __repr__(self) -> str:
        return f"KeyPair(public_key={self.public_key.hex()})"


def _private_key(secret_key: bytes) -> Ed25519PrivateKey:
    if not isinstance(secret_key, (bytes, bytearray)) or len(secret_key) != SECRET_KEY_LENGTH:
        raise MalformedKey(f"Secret key must be {SECRET_KEY_LENGTH} bytes")
    return Ed25519PrivateKey.from_private_bytes(bytes(secret_key))


def generate_keypair(seed: bytes) -> KeyPair:
    """Generate a key pair deterministically from a 32-byte seed.

    Args:
        seed: 32 bytes of entropy

    Returns
    -------
        KeyPair whose secret key is the seed
    """
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_LENGTH:
        raise MalformedKey(f"Seed must be {SEED_LENGTH} bytes")
    private_key = _private_key(bytes(seed))
    public_key = private_key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )
    return KeyPair(public_key=PublicKey(public_key), secret_key=bytes(seed))


def sign(message: bytes, secret_key: bytes) -> Signature:
    """Sign a message with a secret key."""
    return Signature(_private_key(secret_key).sign(bytes(message)))


def verify(message: bytes, signature: bytes, public_key: bytes) -> bool:
    """Check a signature; never raises on malformed input."""
    try:
        if len(public_key) != PUBLIC_KEY_LENGTH:
            return False
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(
            bytes(signature), bytes(message)
        )
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def digest(data: bytes) -> Hash:
    """SHA-256 digest (32 bytes)."""
    return Hash(hashlib.sha256(bytes(data)).digest())


def derive_address(pk: bytes) -> Address:
    """Address = first 20 bytes of digest(pk)."""
    return Address(digest(pk)[:ADDRESS_LENGTH])


def derive_seed(master_seed: int, label: str) -> bytes:
    """Derive a per-actor 32-byte seed from the experiment seed and a label."""
    return digest(f"{master_seed}:{label}".encode("utf-8"))
