"""Backbone routing overlay for private price negotiation.

High-resource backbone nodes each own a most-significant-bit prefix of the
public-key space. Participants register each of their keys with the backbone
that owns it, and negotiation messages travel sender -> sender's backbone ->
destination backbone -> registered endpoint, so they are never broadcast.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import product
from typing import Dict, List, Optional, Sequence, Union

from spb_energy.core.codec import encode_fields
from spb_energy.core.constants import BACKBONE_PREFIX, MAX_OVERLAY_HOPS, PUBLIC_KEY_LENGTH
from spb_energy.core.crypto import KeyPair, PublicKey, Signature, digest, sign, verify
from spb_energy.core.exceptions import (
    BadMessageSignature,
    ConflictingRegistration,
    InvalidPartition,
    NoRoute,
)
from spb_energy.core.simnet import SimNetwork

logger = logging.getLogger(__name__)

KEY_BITS = PUBLIC_KEY_LENGTH * 8


def pk_bits(pk: bytes, count: int = KEY_BITS) -> str:
    """Most significant ``count`` bits of a key as a '0'/'1' string."""
    bits = format(int.from_bytes(bytes(pk), "big"), f"0{len(pk) * 8}b")
    return bits[:count]


@dataclass
class BackboneNode:
    node_id: str
    prefix: str
    registrations: Dict[bytes, str] = field(default_factory=dict)

    def owns(self, pk: bytes) -> bool:
        return pk_bits(pk, len(self.prefix)) == self.prefix


def static_partition(prefix_bits: int) -> List[BackboneNode]:
    """One backbone per bit string of length ``prefix_bits``."""
    if prefix_bits < 1:
        raise InvalidPartition("A partition needs at least one prefix bit")
    return [
        BackboneNode(node_id=f"{BACKBONE_PREFIX}-{prefix}", prefix=prefix)
        for prefix in ("".join(bits) for bits in product("01", repeat=prefix_bits))
    ]


def validate_partition(backbones: Sequence[BackboneNode]):
    """Require prefixes that are prefix-free and cover the whole key space."""
    prefixes = [b.prefix for b in backbones]
    if not prefixes or any(set(p) - {"0", "1"} or not p for p in prefixes):
        raise InvalidPartition(f"Malformed prefixes {prefixes}")
    for i, a in enumerate(prefixes):
        for j, b in enumerate(prefixes):
            if i != j and b.startswith(a):
                raise InvalidPartition(f"Prefix {a} is a prefix of {b}")
    # Kraft sum of a prefix-free, exhaustive binary code is exactly one
    coverage = sum(2 ** (max(map(len, prefixes)) - len(p)) for p in prefixes)
    if coverage != 2 ** max(map(len, prefixes)):
        raise InvalidPartition(f"Prefixes {prefixes} do not cover the key space")


def assign_backbone(pk: bytes, backbones: Sequence[BackboneNode]) -> BackboneNode:
    """The backbone whose prefix matches the key's leading bits."""
    bits = pk_bits(pk)
    for backbone in backbones:
        if bits.startswith(backbone.prefix):
            return backbone
    raise InvalidPartition(f"No backbone owns key {bytes(pk).hex()[:16]}")


#######################
# Negotiation messages
#######################


class NegotiationKind(Enum):
    OFFER = "offer"
    COUNTER = "counter"
    ACCEPT = "accept"
    REJECT = "reject"


@dataclass(frozen=True)
class NegotiationMsg:
    kind: NegotiationKind
    ctx_id: bytes
    price_per_kwh: int
    energy: int
    sender_pk: PublicKey
    dest_pk: PublicKey
    signature: Signature = Signature(b"")

    def signing_payload(self) -> bytes:
        return encode_fields(
            [
                "negotiation",
                self.kind.value,
                self.ctx_id,
                self.price_per_kwh,
                self.energy,
                self.sender_pk,
                self.dest_pk,
            ]
        )

    def canonical(self) -> bytes:
        return self.signing_payload() + encode_fields([self.signature])

    @property
    def msg_id(self) -> str:
        return digest(self.canonical()).hex()[:16]

    def signed(self, secret_key: bytes) -> "NegotiationMsg":
        return replace(self, signature=sign(self.signing_payload(), secret_key))

    def verify_signature(self) -> bool:
        return verify(self.signing_payload(), self.signature, self.sender_pk)


@dataclass(frozen=True)
class RoutedMessage:
    msg: NegotiationMsg
    hops: List[str]
    # Simulated network delay to the endpoint, 0 when the overlay is unbound
    delay_ms: int = 0

    def trace_line(self) -> str:
        padded = list(self.hops) + [""] * (MAX_OVERLAY_HOPS - len(self.hops))
        return ",".join([self.msg.msg_id] + padded)


class Overlay:
    def __init__(self, backbones: Sequence[BackboneNode], net: Optional[SimNetwork] = None):
        """Overlay over a static backbone partition.

        Args:
            backbones: Backbone nodes; their prefixes must partition the key space
            net: When given, routed messages are also posted to the endpoint
                over the simulated network
        """
        validate_partition(backbones)
        self.backbones = list(backbones)
        self.net = net
        self.routed_count = 0
        self.hop_trace: List[str] = []
        self.inboxes: Dict[str, List[NegotiationMsg]] = {}

    def backbone_for(self, pk: bytes) -> BackboneNode:
        return assign_backbone(pk, self.backbones)

    def register(self, pk: bytes, endpoint: str) -> BackboneNode:
        """Associate a key with the node that answers for it.

        Raises
        ------
            ConflictingRegistration: if the key already points at another node
        """
        backbone = self.backbone_for(pk)
        current = backbone.registrations.get(bytes(pk))
        if current is not None and current != endpoint:
            raise ConflictingRegistration(
                f"Key {bytes(pk).hex()[:16]} already registered to {current}"
            )
        backbone.registrations[bytes(pk)] = endpoint
        return backbone

    def endpoint_of(self, pk: bytes) -> Optional[str]:
        return self.backbone_for(pk).registrations.get(bytes(pk))

    def route(self, msg: NegotiationMsg) -> RoutedMessage:
        """Deliver a message to the endpoint registered for its destination key.

        Raises
        ------
            BadMessageSignature: if the sender did not sign the message
            NoRoute: if the destination key is not registered
        """
        if not msg.verify_signature():
            raise BadMessageSignature(
                f"Refusing {msg.kind.value} from {bytes(msg.sender_pk).hex()[:16]}: bad signature"
            )
        dest_backbone = self.backbone_for(msg.dest_pk)
        endpoint = dest_backbone.registrations.get(bytes(msg.dest_pk))
        if endpoint is None:
            raise NoRoute(f"No endpoint registered for {bytes(msg.dest_pk).hex()[:16]}")
        hops = [self.backbone_for(msg.sender_pk).node_id]
        if dest_backbone.node_id != hops[-1]:
            hops.append(dest_backbone.node_id)
        hops.append(endpoint)
        delay = 0
        if self.net is not None and self.net.is_registered(endpoint):
            delay = sum(self.net.latency.draw(self.net.rng) for _ in hops)
            self.net.post(endpoint, msg, delay, source=hops[0])
        routed = RoutedMessage(msg=msg, hops=hops, delay_ms=delay)

        self.routed_count += 1
        self.hop_trace.append(routed.trace_line())
        self.inboxes.setdefault(endpoint, []).append(msg)
        logger.debug("Routed %s %s via %s", msg.kind.value, msg.msg_id, " -> ".join(hops))
        return routed


#######################
# Negotiation
#######################


@dataclass(frozen=True)
class NegotiationParty:
    keypair: KeyPair
    endpoint: str


@dataclass(frozen=True)
class AgreedPrice:
    price_per_kwh: int
    rounds: int
    transcript: List[NegotiationMsg]
    elapsed_ms: int = 0


@dataclass(frozen=True)
class NoDeal:
    rounds: int
    transcript: List[NegotiationMsg]
    elapsed_ms: int = 0


NegotiationResult = Union[AgreedPrice, NoDeal]


def _midpoint(low: int, high: int) -> int:
    return math.ceil((low + high) / 2)


def negotiate(
    overlay: Overlay,
    consumer: NegotiationParty,
    producer: NegotiationParty,
    list_price: int,
    ceiling: int,
    opening_price: int,
    floor_price: int,
    energy: int,
    max_rounds: int = 4,
    negotiable: bool = True,
) -> NegotiationResult:
    """Run the concession protocol between a consumer and a producer.

    The consumer accepts the list price outright if it is within its ceiling.
    Otherwise each round the consumer bids, the producer counters at the
    midpoint of bid and ask (never below its floor) or accepts a bid that
    already reaches that counter, and the consumer accepts a counter within
    its ceiling or raises its bid to the midpoint (never above the ceiling).

    Args:
        overlay: Overlay both parties are registered with
        consumer: Consumer key pair and endpoint
        producer: Producer key pair and endpoint
        list_price: Producer's advertised price per kWh
        ceiling: Highest price the consumer pays
        opening_price: Consumer's first bid
        floor_price: Lowest price the producer accepts
        energy: Energy under negotiation (kWh)
        max_rounds: Rounds before the consumer gives up
        negotiable: Whether the producer's offer admits negotiation

    Messages are exchanged one after the other, so ``elapsed_ms`` on the
    result is the sum of their network delays.

    Returns
    -------
        AgreedPrice within [floor_price, ceiling], or NoDeal
    """
    if floor_price > list_price:
        raise ValueError(f"Floor {floor_price} is above the list price {list_price}")
    ctx_id = digest(
        encode_fields([consumer.keypair.public_key, producer.keypair.public_key, list_price, energy])
    )
    transcript: List[NegotiationMsg] = []
    elapsed = 0

    def send(sender: NegotiationParty, dest: NegotiationParty, kind: NegotiationKind, price: int):
        nonlocal elapsed
        msg = NegotiationMsg(
            kind=kind,
            ctx_id=ctx_id,
            price_per_kwh=price,
            energy=energy,
            sender_pk=sender.keypair.public_key,
            dest_pk=dest.keypair.public_key,
        ).signed(sender.keypair.secret_key)
        elapsed += overlay.route(msg).delay_ms
        transcript.append(msg)
        return msg

    ask = list_price
    if ask <= ceiling or not negotiable:
        if ask > ceiling:
            send(consumer, producer, NegotiationKind.REJECT, ask)
            return NoDeal(rounds=0, transcript=transcript, elapsed_ms=elapsed)
        send(consumer, producer, NegotiationKind.OFFER, ask)
        send(producer, consumer, NegotiationKind.ACCEPT, ask)
        return AgreedPrice(
            price_per_kwh=ask, rounds=1, transcript=transcript, elapsed_ms=elapsed
        )

    bid = min(opening_price, ceiling)
    for round_number in range(1, max_rounds + 1):
        kind = NegotiationKind.OFFER if round_number == 1 else NegotiationKind.COUNTER
        send(consumer, producer, kind, bid)
        counter = max(floor_price, _midpoint(bid, ask))
        if bid >= counter:
            send(producer, consumer, NegotiationKind.ACCEPT, bid)
            return AgreedPrice(bid, round_number, transcript, elapsed)
        send(producer, consumer, NegotiationKind.COUNTER, counter)
        ask = counter
        if ask <= ceiling:
            send(consumer, producer, NegotiationKind.ACCEPT, ask)
            return AgreedPrice(ask, round_number, transcript, elapsed)
        bid = min(ceiling, _midpoint(bid, ask))

    send(consumer, producer, NegotiationKind.REJECT, ask)
    logger.info("Negotiation %s ended without a deal", ctx_id.hex()[:16])
    return NoDeal(rounds=max_rounds, transcript=transcript, elapsed_ms=elapsed)
