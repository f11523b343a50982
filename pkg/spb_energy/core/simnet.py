"""Deterministic discrete-event engine.

One global priority queue ordered by (fire_time, sequence) drives every node.
Latency draws come from a seeded ``random.Random`` so a run is a pure function
of its seed and scenario.
"""

import heapq
import itertools
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

from spb_energy.core.constants import DEFAULT_LATENCY_BASE_MS, DEFAULT_LATENCY_JITTER_MS
from spb_energy.core.crypto import digest
from spb_energy.core.exceptions import PastEvent, UnknownNode

logger = logging.getLogger(__name__)

TIMER = "timer"


@dataclass(order=True, frozen=True)
class SimEvent:
    fire_time: int
    sequence: int
    target: str = field(compare=False)
    payload: Any = field(compare=False)
    kind: str = field(compare=False, default="message")
    source: Optional[str] = field(compare=False, default=None)


@dataclass(frozen=True)
class LatencyModel:
    base_ms: int = DEFAULT_LATENCY_BASE_MS
    jitter_ms: int = DEFAULT_LATENCY_JITTER_MS

    def __post_init__(self):
        if self.base_ms < 0 or self.jitter_ms < 0:
            raise ValueError("Latency parameters must be non-negative")

    @property
    def max_delay(self) -> int:
        return self.base_ms + self.jitter_ms

    def draw(self, rng: random.Random) -> int:
        if self.jitter_ms == 0:
            return self.base_ms
        return self.base_ms + rng.randint(0, self.jitter_ms)


@dataclass
class SimClock:
    now: int = 0


Handler = Callable[[SimEvent], None]


def payload_digest(payload: Any) -> str:
    """Short stable digest of a payload for trace lines."""
    canonical = getattr(payload, "canonical", None)
    raw = canonical() if callable(canonical) else repr(payload).encode("utf-8")
    return digest(raw).hex()[:16]


class SimNetwork:
    def __init__(
        self,
        latency: Optional[LatencyModel] = None,
        rng: Optional[random.Random] = None,
    ):
        """Initialize an empty network.

        Args:
            latency: Delivery latency model for node-to-node messages
            rng: Seeded random source (a fixed seed of 0 when omitted)
        """
        self.latency = latency or LatencyModel()
        self.rng = rng or random.Random(0)
        self.clock = SimClock()
        self._queue: List[SimEvent] = []
        self._sequence = itertools.count()
        self._handlers: Dict[str, Handler] = {}
        self._trace: List[str] = []
        self.scheduled_count = 0
        self.processed_count = 0
        self.deliveries = Counter()

    @property
    def now(self) -> int:
        return self.clock.now

    @property
    def nodes(self) -> List[str]:
        return list(self._handlers)

    def register(self, node_id: str, handler: Handler):
        self._handlers[node_id] = handler

    def is_registered(self, node_id: str) -> bool:
        return node_id in self._handlers

    def _require(self, node_id: str):
        if node_id not in self._handlers:
            raise UnknownNode(f"Node '{node_id}' is not registered")

    def schedule(self, event: SimEvent):
        """Enqueue an event; it must not lie in the past."""
        if event.fire_time < self.clock.now:
            raise PastEvent(
                f"Event at t={event.fire_time} is before now={self.clock.now}"
            )
        self._require(event.target)
        heapq.heappush(self._queue, event)
        self.scheduled_count += 1

    def post(
        self,
        target: str,
        payload: Any,
        delay_ms: int,
        kind: Optional[str] = None,
        source: Optional[str] = None,
    ) -> SimEvent:
        event = SimEvent(
            fire_time=self.clock.now + delay_ms,
            sequence=next(self._sequence),
            target=target,
            payload=payload,
            kind=kind or type(payload).__name__,
            source=source,
        )
        self.schedule(event)
        return event

    def unicast(self, source: str, target: str, payload: Any, extra_delay_ms: int = 0) -> SimEvent:
        self._require(source)
        delay = self.latency.draw(self.rng) + extra_delay_ms
        return self.post(target, payload, delay, source=source)

    def broadcast(self, source: str, payload: Any) -> List[SimEvent]:
        """Deliver to every other node, each with its own latency draw."""
        self._require(source)
        return [
            self.unicast(source, node_id, payload)
            for node_id in self._handlers
            if node_id != source
        ]

    def set_timer(self, node_id: str, delay_ms: int, token: Any) -> SimEvent:
        return self.post(node_id, token, delay_ms, kind=TIMER, source=node_id)

    def pending(self) -> int:
        return len(self._queue)

    def next_fire_time(self) -> Optional[int]:
        return self._queue[0].fire_time if self._queue else None

    def step(self) -> SimEvent:
        event = heapq.heappop(self._queue)
        self.clock.now = event.fire_time
        self.processed_count += 1
        self.deliveries[event.kind] += 1
        self._trace.append(
            f"{event.fire_time},{event.target},{event.kind},{payload_digest(event.payload)}"
        )
        self._handlers[event.target](event)
        return event

    def run_until(self, t: int) -> int:
        """Process every event with fire_time ≤ t, then set the clock to t."""
        processed = 0
        while self._queue and self._queue[0].fire_time <= t:
            self.step()
            processed += 1
        self.clock.now = max(self.clock.now, t)
        return processed

    def run_while(self, predicate: Callable[[], bool], horizon_ms: int) -> int:
        """Process events while ``predicate`` holds, up to ``horizon_ms``."""
        processed = 0
        while (
            self._queue
            and predicate()
            and self._queue[0].fire_time <= horizon_ms
        ):
            self.step()
            processed += 1
        return processed

    def trace_lines(self) -> List[str]:
        return list(self._trace)

    def trace_digest(self) -> str:
        return digest("\n".join(self._trace).encode("utf-8")).hex()
