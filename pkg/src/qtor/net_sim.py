"""Deterministic discrete-event network engine.

Delivers classical messages and quantum pulse batches between nodes,
applies channel physics on the quantum path, hosts passive adversary
observers, and records everything into a globally ordered trace. Two
runs over the same scenario and seed produce byte-identical traces.

Quantum pulses travel as one batched event per session segment; the
per-pulse physics still applies inside the batch. Same-time events fire
in scheduling order.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ConfigError, RunawayScenario, SchedulingError
from .identity import IdentityRegistry
from .kms import KeyIdGenerator
from .qkd_link import ChannelModel, InterceptResendTap, transmit
from .quantum_relay import QuantumRelay, RoutingTable

EVENT_CLASSICAL = "ClassicalDeliver"
EVENT_QUANTUM = "QuantumDeliver"
EVENT_TIMER = "TimerFire"

FIBER_KM_PER_TIME_UNIT = 2.0e5  # light in fiber, km per simulated second


@dataclass
class Event:
    time: float
    kind: str
    handler: Callable[["Simulation", "Event"], None]
    payload: dict = field(default_factory=dict)
    seq: int = -1


@dataclass(frozen=True)
class TraceEvent:
    time: float
    seq: int
    kind: str
    data: dict


class Trace:
    """Append-only ordered event log; the substrate every audit runs on."""

    def __init__(self):
        self.events: list[TraceEvent] = []

    def append(self, time: float, kind: str, data: dict) -> TraceEvent:
        ev = TraceEvent(time, len(self.events), kind, data)
        self.events.append(ev)
        return ev

    def of_kind(self, *kinds: str) -> list[TraceEvent]:
        return [ev for ev in self.events if ev.kind in kinds]

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_jsonl(self) -> str:
        lines = []
        for ev in self.events:
            record = {"time": ev.time, "seq": ev.seq, "kind": ev.kind, **ev.data}
            lines.append(json.dumps(record, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class ClassicalLink:
    a: str
    b: str
    latency: float = 1.0
    wiretaps: list = field(default_factory=list)

    def __post_init__(self):
        if self.latency < 0:
            raise ConfigError("link latency must be non-negative")

    @property
    def pair(self) -> frozenset:
        return frozenset((self.a, self.b))


@dataclass
class WiretapHandle:
    """Passive copy of every clear field crossing one classical link."""

    link: frozenset
    name: str
    observed: list[int] = field(default_factory=list)  # trace seqs


@dataclass
class CuriousNodeHandle:
    """Marks a node whose own legitimate view is analyzed as an adversary."""

    node: str
    name: str


@dataclass
class RelayObserverHandle:
    """Adversary reading the relay's observation log."""

    name: str = "relay_observer"


class Simulation:
    """Single-threaded event loop owning all node, relay, and KMS state."""

    def __init__(
        self,
        seed: int,
        relay_table: RoutingTable | None = None,
        default_latency: float = 1.0,
    ):
        self.seed = seed
        self.now = 0.0
        self.trace = Trace()
        self.key_ids = KeyIdGenerator()
        self.registry = IdentityRegistry()
        self.relay = QuantumRelay(relay_table) if relay_table is not None else None
        self.default_latency = default_latency
        self._queue: list[tuple[float, int, Event]] = []
        self._seq = 0
        self._actors: dict[str, Any] = {}
        self._links: dict[frozenset, ClassicalLink] = {}
        self._segments: dict[str, ChannelModel] = {}
        self._taps: dict[str, InterceptResendTap] = {}
        self.wiretaps: list[WiretapHandle] = []
        self.curious_nodes: list[CuriousNodeHandle] = []
        self.relay_observer: RelayObserverHandle | None = None

    # -- topology ------------------------------------------------------------

    def register_actor(self, node_id: str, actor) -> None:
        self._actors[node_id] = actor
        self.registry.register(node_id)

    def actor(self, node_id: str):
        return self._actors[node_id]

    def add_link(self, a: str, b: str, latency: float) -> ClassicalLink:
        link = ClassicalLink(a, b, latency)
        self._links[link.pair] = link
        return link

    def set_quantum_segment(self, node_id: str, channel: ChannelModel) -> None:
        """Fiber between this node and the relay's port (or input)."""
        self._segments[node_id] = channel

    def link_for(self, a: str, b: str) -> ClassicalLink:
        pair = frozenset((a, b))
        link = self._links.get(pair)
        if link is None:
            link = ClassicalLink(a, b, self.default_latency)
            self._links[pair] = link
        return link

    # -- adversaries -----------------------------------------------------------

    def attach_adversary(self, kind: str, **target):
        if kind == "intercept_resend":
            segment = target.get("segment")
            if segment not in self._segments:
                raise ConfigError(f"no quantum segment for node {segment!r}")
            tap = InterceptResendTap()
            self._taps[segment] = tap
            return tap
        if kind == "wiretap":
            a, b = target.get("link", (None, None))
            if a not in self._actors or b not in self._actors:
                raise ConfigError(f"wiretap target link ({a!r}, {b!r}) has unknown endpoint")
            link = self.link_for(a, b)
            handle = WiretapHandle(link.pair, f"wiretap:{a}~{b}")
            link.wiretaps.append(handle)
            self.wiretaps.append(handle)
            return handle
        if kind == "curious_node":
            node = target.get("node")
            if node not in self._actors:
                raise ConfigError(f"curious node {node!r} is not registered")
            handle = CuriousNodeHandle(node, f"curious:{node}")
            self.curious_nodes.append(handle)
            return handle
        if kind == "relay_observer":
            if self.relay is None:
                raise ConfigError("scenario has no relay to observe")
            self.relay_observer = RelayObserverHandle()
            return self.relay_observer
        raise ConfigError(f"unknown adversary kind {kind!r}")

    # -- event machinery -------------------------------------------------------

    def record(self, kind: str, data: dict) -> TraceEvent:
        return self.trace.append(self.now, kind, data)

    def schedule(self, event: Event) -> None:
        if event.time < self.now:
            raise SchedulingError(f"event at {event.time} is before current time {self.now}")
        event.seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (event.time, event.seq, event))

    def schedule_in(self, delay: float, kind: str, handler, payload: dict | None = None) -> None:
        self.schedule(Event(self.now + delay, kind, handler, payload or {}))

    def schedule_timer(self, delay: float, callback, payload: dict | None = None) -> None:
        self.schedule_in(delay, EVENT_TIMER, lambda sim, ev: callback(sim, ev), payload)

    def run_until_idle(self, max_steps: int = 1_000_000) -> Trace:
        steps = 0
        while self._queue:
            steps += 1
            if steps > max_steps:
                raise RunawayScenario(f"exceeded {max_steps} events without going idle")
            _, _, event = heapq.heappop(self._queue)
            self.now = event.time
            event.handler(self, event)
        return self.trace

    # -- classical path ----------------------------------------------------------

    def send_classical(self, msg) -> None:
        """Queue a classical message for delivery after link latency.

        The trace records the clear fields twice, at send and at delivery;
        wiretaps on the traversed link observe the delivery record.
        """
        link = self.link_for(msg.origin, msg.recipient)
        clear = msg.clear_fields()
        self.record("msg_send", {"origin": msg.origin, "dst": msg.recipient, **clear})

        def deliver(sim: Simulation, event: Event) -> None:
            tev = sim.record(
                "msg_deliver", {"origin": msg.origin, "dst": msg.recipient, **clear}
            )
            for tap in link.wiretaps:
                tap.observed.append(tev.seq)
            sim._actors[msg.recipient].handle_classical(msg, sim)

        self.schedule(Event(self.now + link.latency, EVENT_CLASSICAL, deliver))

    # -- quantum path ------------------------------------------------------------

    def quantum_latency(self, node_id: str) -> float:
        seg = self._segments.get(node_id)
        return (seg.length_km / FIBER_KM_PER_TIME_UNIT) if seg else 0.0

    def send_quantum(self, origin: str, pulses: list, meta: dict) -> None:
        """Emit a pulse batch toward the relay; it may be routed onward.

        The physical channel (loss, taps, flips) of the whole fiber run is
        applied at detection; the relay log therefore reflects the emitted
        pulse schedule, which is what a mid-span passive device sees.
        """
        if self.relay is None:
            raise ConfigError("scenario has no quantum relay")
        if origin not in self._segments:
            raise ConfigError(f"node {origin!r} has no fiber to the relay")
        frequency = pulses[0].frequency_channel if pulses else -1
        self.record(
            "quantum_send",
            {"origin": origin, "count": len(pulses), "frequency_channel": frequency},
        )

        def at_relay(sim: Simulation, event: Event) -> None:
            port = None
            for pulse in pulses:
                port, _ = sim.relay.route_pulse(pulse, sim.now)
                sim.record("relay_obs", {"frequency_channel": pulse.frequency_channel})
            if port is None:
                sim.record(
                    "quantum_dropped",
                    {"count": len(pulses), "frequency_channel": frequency},
                )
                return
            if port not in sim._segments:
                raise ConfigError(f"relay port {port!r} has no fiber segment")

            def at_node(sim2: Simulation, ev2: Event) -> None:
                channel = sim2._segments[origin].compose(sim2._segments[port])
                taps = [
                    t
                    for key in (origin, port)
                    if (t := sim2._taps.get(key)) is not None
                ]
                arrived = transmit(pulses, channel, taps[0] if taps else None, meta["rng"])
                for extra in taps[1:]:
                    arrived = extra.apply(arrived, meta["rng"])
                sim2.record(
                    "quantum_deliver",
                    {"node": port, "count": len(arrived), "frequency_channel": frequency},
                )
                sim2._actors[port].handle_quantum(arrived, meta, sim2)

            sim.schedule(
                Event(sim.now + sim.quantum_latency(port), EVENT_QUANTUM, at_node)
            )

        self.schedule(
            Event(self.now + self.quantum_latency(origin), EVENT_QUANTUM, at_relay)
        )
