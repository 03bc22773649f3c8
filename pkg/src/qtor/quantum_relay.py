"""Passive frequency-routed switch with one multiplexed input.

The relay forwards each pulse, untouched, to the output port assigned
to its frequency channel. It never reads basis or bit: the observation
record has no field for them, so even a fully curious relay log holds
nothing but arrival times and frequencies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError
from .qkd_link import PhotonPulse


@dataclass(frozen=True)
class RelayObservation:
    """Everything a passive switch can physically record about a pulse."""

    time: float
    frequency_channel: int


class RoutingTable:
    """Immutable injective map from frequency channel to output port."""

    def __init__(self, entries: dict[int, str]):
        ports = list(entries.values())
        if len(set(ports)) != len(ports):
            raise ConfigError("routing table must map each frequency to a distinct node")
        for freq in entries:
            if freq < 0:
                raise ConfigError("frequency channels must be non-negative")
        self._entries = dict(entries)

    def port_for(self, frequency_channel: int) -> str | None:
        return self._entries.get(frequency_channel)

    def frequencies(self) -> list[int]:
        return list(self._entries)

    def items(self):
        return self._entries.items()


class QuantumRelay:
    """Single-input passive switch; unmapped frequencies drop silently."""

    def __init__(self, table: RoutingTable):
        self.table = table
        self._observations: list[RelayObservation] = []

    def route_pulse(
        self, pulse: PhotonPulse, now: float
    ) -> tuple[str | None, RelayObservation]:
        """Route one pulse; returns (port, observation), port None on drop.

        The pulse object is returned to the caller untouched: a passive
        device cannot modify basis or bit, and cannot signal a drop.
        """
        obs = RelayObservation(now, pulse.frequency_channel)
        self._observations.append(obs)
        return self.table.port_for(pulse.frequency_channel), obs

    def log(self) -> list[RelayObservation]:
        """All observations in arrival order."""
        return list(self._observations)

    def serialized_log(self) -> str:
        """JSON-lines form of the log, exactly (time, frequency) pairs."""
        return "\n".join(
            json.dumps({"time": o.time, "frequency_channel": o.frequency_channel})
            for o in self._observations
        )


def relay_log(relay: QuantumRelay) -> list[RelayObservation]:
    return relay.log()
