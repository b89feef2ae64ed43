"""Static road-network model: lanes, intersections, movements and phases."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable


class SignalState(IntEnum):
    """Right-of-way of a movement during a phase. Codes grow with priority."""

    PROHIBITED = -1
    PERMITTED = 0
    PROTECTED = 1


@dataclass(frozen=True)
class Lane:
    id: str
    length_m: float
    upstream: str | None = None
    downstream: str | None = None
    speed_limit: float = 13.89

    @property
    def is_source(self) -> bool:
        return self.upstream is None

    @property
    def is_sink(self) -> bool:
        return self.downstream is None


@dataclass(frozen=True)
class Movement:
    id: str
    in_lane: str
    out_lane: str
    owner: str


@dataclass(frozen=True)
class Phase:
    id: str
    owner: str
    signal: dict[str, SignalState]

    def __hash__(self) -> int:
        return hash((self.id, self.owner))


@dataclass(frozen=True)
class Intersection:
    """A signalised junction.

    ``incoming`` and ``outgoing`` are ordered clockwise from north; this order
    defines the across-lane positional index used by the state encoder.
    """

    id: str
    incoming: tuple[str, ...]
    outgoing: tuple[str, ...]

    @property
    def lanes(self) -> tuple[str, ...]:
        return self.incoming + self.outgoing


class NetworkError(ValueError):
    pass


def green_set(phase: Phase) -> frozenset[str]:
    return frozenset(m for m, s in phase.signal.items() if s != SignalState.PROHIBITED)


def jaccard(a: Phase, b: Phase) -> float:
    """Overlap of the green movement sets of two phases of one intersection."""
    if a.owner != b.owner:
        raise NetworkError(f"phases {a.id!r} and {b.id!r} belong to different intersections")
    ga, gb = green_set(a), green_set(b)
    union = ga | gb
    if not union:
        return 1.0
    return len(ga & gb) / len(union)


@dataclass
class RoadNetwork:
    lanes: dict[str, Lane]
    intersections: dict[str, Intersection]
    movements: dict[str, Movement]
    phases: dict[str, list[Phase]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._into: dict[str, list[Movement]] = {lid: [] for lid in self.lanes}
        self._out_of: dict[str, list[Movement]] = {lid: [] for lid in self.lanes}
        self._owned: dict[str, list[Movement]] = {vid: [] for vid in self.intersections}
        self._by_pair: dict[tuple[str, str], Movement] = {}
        for m in self.movements.values():
            if m.out_lane in self._into:
                self._into[m.out_lane].append(m)
            if m.in_lane in self._out_of:
                self._out_of[m.in_lane].append(m)
            self._owned.setdefault(m.owner, []).append(m)
            self._by_pair[(m.in_lane, m.out_lane)] = m

    # -- lookups -----------------------------------------------------------

    def movements_of(self, intersection: str) -> list[Movement]:
        return self._owned[intersection]

    def phases_of(self, intersection: str) -> list[Phase]:
        return self.phases[intersection]

    def movement_between(self, in_lane: str, out_lane: str) -> Movement | None:
        return self._by_pair.get((in_lane, out_lane))

    def movements_into(self, lane: str) -> list[Movement]:
        """Movements feeding ``lane`` (their outgoing lane is ``lane``)."""
        try:
            return self._into[lane]
        except KeyError:
            raise NetworkError(f"unknown lane {lane!r}") from None

    def movements_out_of(self, lane: str) -> list[Movement]:
        """Movements draining ``lane`` (their incoming lane is ``lane``)."""
        try:
            return self._out_of[lane]
        except KeyError:
            raise NetworkError(f"unknown lane {lane!r}") from None

    @property
    def source_lanes(self) -> list[str]:
        return sorted(lid for lid, lane in self.lanes.items() if lane.is_source)

    @property
    def sink_lanes(self) -> list[str]:
        return sorted(lid for lid, lane in self.lanes.items() if lane.is_sink)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "lanes": [
                {
                    "id": l.id,
                    "length_m": l.length_m,
                    "upstream": l.upstream,
                    "downstream": l.downstream,
                    "speed_limit": l.speed_limit,
                }
                for l in self.lanes.values()
            ],
            "intersections": [
                {"id": v.id, "incoming": list(v.incoming), "outgoing": list(v.outgoing)}
                for v in self.intersections.values()
            ],
            "movements": [
                {"id": m.id, "in_lane": m.in_lane, "out_lane": m.out_lane, "owner": m.owner}
                for m in self.movements.values()
            ],
            "phases": [
                {"id": p.id, "owner": p.owner, "signal": {k: int(s) for k, s in p.signal.items()}}
                for vid in self.intersections
                for p in self.phases.get(vid, [])
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, check: bool = True) -> "RoadNetwork":
        lane_ids = [d["id"] for d in data["lanes"]]
        dupes = sorted({x for x in lane_ids if lane_ids.count(x) > 1})
        if dupes:
            raise NetworkError(f"duplicate lane ids: {dupes}")
        lanes = {
            d["id"]: Lane(
                d["id"],
                float(d["length_m"]),
                d.get("upstream"),
                d.get("downstream"),
                float(d.get("speed_limit", 13.89)),
            )
            for d in data["lanes"]
        }
        intersections = {
            d["id"]: Intersection(d["id"], tuple(d["incoming"]), tuple(d["outgoing"]))
            for d in data["intersections"]
        }
        movements = {
            d["id"]: Movement(d["id"], d["in_lane"], d["out_lane"], d["owner"])
            for d in data["movements"]
        }
        phases: dict[str, list[Phase]] = {vid: [] for vid in intersections}
        for d in data["phases"]:
            signal = {k: SignalState(int(c)) for k, c in d["signal"].items()}
            phases.setdefault(d["owner"], []).append(Phase(d["id"], d["owner"], signal))
        net = cls(lanes, intersections, movements, phases)
        if check:
            problems = validate(net)
            if problems:
                raise NetworkError("invalid network:\n  " + "\n  ".join(problems))
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RoadNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def validate(net: RoadNetwork) -> list[str]:
    """Return human-readable invariant violations; empty when the network is well formed."""
    out: list[str] = []
    for lid, lane in net.lanes.items():
        if lid != lane.id:
            out.append(f"lane key {lid!r} does not match lane id {lane.id!r}")
        if not lane.length_m > 0:
            out.append(f"lane {lid!r} has non-positive length {lane.length_m}")
        if not lane.speed_limit > 0:
            out.append(f"lane {lid!r} has non-positive speed limit {lane.speed_limit}")
        for end in (lane.upstream, lane.downstream):
            if end is not None and end not in net.intersections:
                out.append(f"lane {lid!r} references unknown intersection {end!r}")

    for vid, v in net.intersections.items():
        for lid in v.incoming:
            if lid not in net.lanes:
                out.append(f"intersection {vid!r} lists unknown incoming lane {lid!r}")
            elif net.lanes[lid].downstream != vid:
                out.append(f"intersection {vid!r}: incoming lane {lid!r} does not end here")
        for lid in v.outgoing:
            if lid not in net.lanes:
                out.append(f"intersection {vid!r} lists unknown outgoing lane {lid!r}")
            elif net.lanes[lid].upstream != vid:
                out.append(f"intersection {vid!r}: outgoing lane {lid!r} does not start here")

    for mid, m in net.movements.items():
        if m.in_lane == m.out_lane:
            out.append(f"movement {mid!r} has identical in and out lane {m.in_lane!r}")
        if m.owner not in net.intersections:
            out.append(f"movement {mid!r} owned by unknown intersection {m.owner!r}")
            continue
        v = net.intersections[m.owner]
        if m.in_lane not in net.lanes:
            out.append(f"movement {mid!r} references unknown lane {m.in_lane!r}")
        elif m.in_lane not in v.incoming:
            out.append(f"movement {mid!r}: in lane {m.in_lane!r} is not incoming at {m.owner!r}")
        if m.out_lane not in net.lanes:
            out.append(f"movement {mid!r} references unknown lane {m.out_lane!r}")
        elif m.out_lane not in v.outgoing:
            out.append(f"movement {mid!r}: out lane {m.out_lane!r} is not outgoing at {m.owner!r}")

    for vid in net.intersections:
        owned = {m.id for m in net.movements.values() if m.owner == vid}
        seen: set[str] = set()
        for p in net.phases.get(vid, []):
            if p.owner != vid:
                out.append(f"phase {p.id!r} listed under {vid!r} but owned by {p.owner!r}")
            if p.id in seen:
                out.append(f"duplicate phase id {p.id!r} at {vid!r}")
            seen.add(p.id)
            for mid in sorted(owned - set(p.signal)):
                out.append(f"phase {p.id!r} has no signal for movement {mid!r}")
            for mid in sorted(set(p.signal) - owned):
                out.append(f"phase {p.id!r} signals foreign movement {mid!r}")
            if not green_set(p):
                out.append(f"phase {p.id!r} prohibits every movement")
        if owned and not net.phases.get(vid):
            out.append(f"intersection {vid!r} has movements but no phases")

    out.extend(_connectivity_violations(net))
    return out


def _connectivity_violations(net: RoadNetwork) -> Iterable[str]:
    reach = {lid for lid, lane in net.lanes.items() if lane.is_source}
    if net.lanes and not reach:
        yield "network has no source lane"
        return
    frontier = list(reach)
    while frontier:
        lid = frontier.pop()
        for m in net._out_of.get(lid, []):
            if m.out_lane in net.lanes and m.out_lane not in reach:
                reach.add(m.out_lane)
                frontier.append(m.out_lane)
    for lid in sorted(set(net.lanes) - reach):
        yield f"lane {lid!r} is unreachable from every source lane"
