"""Message passing between agents.

Each tick every infrastructure agent sends its confirmed tracks to the ego.
Depending on the topology, infrastructure agents also gossip their tracks to
each other; receivers absorb that crosstalk naively, which is what correlates
the estimates the ego later receives.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import ValidationError
from .fusion import TrackReport, fuse_at_tracking
from .rng import rng_stream

logger = logging.getLogger(__name__)


class TopologyKind(str, Enum):
    NO_CORRELATION = "no_correlation"
    MINOR_CORRELATION = "minor_correlation"
    MAJOR_CORRELATION = "major_correlation"

    @classmethod
    def parse(cls, name):
        """Accepts enum values or the CLI spellings none / minor / major."""
        aliases = {"none": cls.NO_CORRELATION, "minor": cls.MINOR_CORRELATION, "major": cls.MAJOR_CORRELATION}
        if name in aliases:
            return aliases[name]
        try:
            return cls(name)
        except ValueError:
            raise ValidationError(f"unknown topology '{name}'")

    @property
    def cli_name(self):
        return self.value.split("_")[0]


DEFAULT_CROSSTALK = {
    TopologyKind.NO_CORRELATION: 0.0,
    TopologyKind.MINOR_CORRELATION: 0.1,
    TopologyKind.MAJOR_CORRELATION: 0.8,
}


@dataclass(frozen=True)
class TopologyModel:
    kind: TopologyKind
    infra_crosstalk_probability: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TopologyKind(self.kind))
        if self.infra_crosstalk_probability is None:
            object.__setattr__(self, "infra_crosstalk_probability", DEFAULT_CROSSTALK[self.kind])
        p = self.infra_crosstalk_probability
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"crosstalk probability must be in [0, 1], got {p}")


@dataclass(frozen=True)
class NetworkConfig:
    crosstalk: Mapping[TopologyKind, float] = field(default_factory=lambda: dict(DEFAULT_CROSSTALK))
    latency_ticks: int = 0

    def __post_init__(self):
        merged = dict(DEFAULT_CROSSTALK)
        merged.update({TopologyKind.parse(k): float(v) for k, v in dict(self.crosstalk).items()})
        object.__setattr__(self, "crosstalk", merged)
        if isinstance(self.latency_ticks, bool) or not isinstance(self.latency_ticks, int) or self.latency_ticks < 0:
            raise ValidationError("network.latency_ticks must be a non-negative integer")
        for kind, p in merged.items():
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"network.crosstalk.{kind.cli_name} must be in [0, 1]")

    def topology(self, kind) -> TopologyModel:
        kind = TopologyKind.parse(kind) if isinstance(kind, str) else kind
        return TopologyModel(kind, self.crosstalk[kind])


@dataclass(frozen=True, eq=False)
class Message:
    sender_id: str
    receiver_id: str
    tick_sent: int
    payload: Tuple[TrackReport, ...] = ()
    latency_ticks: int = 0

    @property
    def delivery_tick(self):
        return self.tick_sent + self.latency_ticks

    def to_record(self):
        return {
            "sender": self.sender_id,
            "receiver": self.receiver_id,
            "tick_sent": self.tick_sent,
            "tick_delivered": self.delivery_tick,
            "payload_size": len(self.payload),
            "track_ids": [r.track_id for r in self.payload],
        }


def make_payload(tracker, sender_id) -> Tuple[TrackReport, ...]:
    """Confirmed tracks of one agent, ready to send."""
    return tuple(TrackReport.from_track(t, sender_id) for t in tracker.confirmed_tracks)


def ego_messages(ego_id, infrastructure_ids: Sequence[str], payloads: Mapping[str, Sequence[TrackReport]],
                 tick, latency_ticks=0) -> List[Message]:
    """One message from every infrastructure agent to the ego, in sorted sender order."""
    return [Message(sender, ego_id, tick, tuple(payloads.get(sender, ())), latency_ticks)
            for sender in sorted(infrastructure_ids)]


def crosstalk_messages(infrastructure_ids: Sequence[str], payloads: Mapping[str, Sequence[TrackReport]],
                       topology: TopologyModel, tick, rng, latency_ticks=0) -> List[Message]:
    """Each ordered infrastructure pair (i, j) draws once from `rng`, in sorted
    order; i sends to j when the draw falls below the crosstalk probability."""
    infra = sorted(infrastructure_ids)
    p = topology.infra_crosstalk_probability
    messages = []
    for sender in infra:
        for receiver in infra:
            if sender == receiver:
                continue
            if rng.random() < p:
                messages.append(Message(sender, receiver, tick, tuple(payloads.get(sender, ())), latency_ticks))
    return messages


def route_tick(ego_id, infrastructure_ids: Sequence[str], payloads: Mapping[str, Sequence[TrackReport]],
               topology: TopologyModel, tick, rng, latency_ticks=0) -> List[Message]:
    """Messages sent this tick.

    Every infrastructure agent sends to the ego, then crosstalk is drawn as in
    `crosstalk_messages`. The ego never sends. A None ego gives crosstalk only.
    """
    messages = [] if ego_id is None else ego_messages(ego_id, infrastructure_ids, payloads, tick, latency_ticks)
    return messages + crosstalk_messages(infrastructure_ids, payloads, topology, tick, rng, latency_ticks)


def ingest_crosstalk(tracker, messages: Sequence[Message]):
    """Fold neighbour payloads into an infrastructure tracker as plain measurements."""
    for message in messages:
        fuse_at_tracking(tracker, message.payload)
    return tracker


class MessageLog:
    """Newline-delimited JSON, one record per routed message."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")

    def write(self, message: Message):
        self._fh.write(json.dumps(message.to_record(), sort_keys=True) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Network:
    """Routes payloads tick by tick and holds messages still in flight."""

    def __init__(self, ego_id, infrastructure_ids, topology: TopologyModel, seed, latency_ticks=0,
                 generator="philox", log: Optional[MessageLog] = None):
        self.ego_id = ego_id
        self.infrastructure_ids = sorted(infrastructure_ids)
        self.topology = topology
        self.seed = seed
        self.latency_ticks = latency_ticks
        self.generator = generator
        self.log = log
        self._in_flight: Dict[int, List[Message]] = defaultdict(list)
        self.sent = 0

    def _send(self, outgoing: List[Message]):
        for message in outgoing:
            self._in_flight[message.delivery_tick].append(message)
            if self.log is not None:
                self.log.write(message)
        self.sent += len(outgoing)

    def _deliver(self, tick, receivers) -> Dict[str, List[Message]]:
        due = self._in_flight.pop(tick, [])
        delivered = defaultdict(list)
        waiting = []
        for message in due:
            if message.receiver_id in receivers:
                delivered[message.receiver_id].append(message)
            else:
                waiting.append(message)
        if waiting:
            self._in_flight[tick] = waiting
        return dict(delivered)

    def exchange_crosstalk(self, payloads: Mapping[str, Sequence[TrackReport]], tick) -> Dict[str, List[Message]]:
        """Draw and send this tick's crosstalk; return what infrastructure receives now."""
        rng = rng_stream(self.seed, "net", tick, generator=self.generator)
        outgoing = crosstalk_messages(self.infrastructure_ids, payloads, self.topology, tick, rng,
                                      self.latency_ticks)
        self._send(outgoing)
        delivered = self._deliver(tick, set(self.infrastructure_ids))
        logger.debug(f"tick {tick}: {len(outgoing)} crosstalk sent, "
                     f"{sum(len(v) for v in delivered.values())} delivered")
        return delivered

    def send_to_ego(self, payloads: Mapping[str, Sequence[TrackReport]], tick) -> List[Message]:
        """Send every infrastructure payload to the ego; return what the ego receives now."""
        outgoing = ego_messages(self.ego_id, self.infrastructure_ids, payloads, tick, self.latency_ticks)
        self._send(outgoing)
        delivered = self._deliver(tick, {self.ego_id}).get(self.ego_id, [])
        logger.debug(f"tick {tick}: {len(outgoing)} sent to ego, {len(delivered)} delivered")
        return delivered

    @property
    def in_flight(self):
        return sum(len(v) for v in self._in_flight.values())
