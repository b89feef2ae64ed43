"""Discrete-time microscopic simulator with point vehicles on one-dimensional lanes.

Vehicle positions are distances (m) to the downstream end of the current lane,
so they decrease as a vehicle drives.  Speeds follow a deterministic safe-speed
rule: accelerate by at most ``MAX_ACCEL`` toward the speed limit, never closer
than ``HEADWAY`` to the leader, and brake as hard as needed to hold the stop
line when the next movement is not released.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .network import NetworkError, Phase, RoadNetwork, SignalState, green_set

HEADWAY = 7.5  # minimum spacing of positions on one lane (vehicle length + jam gap)
VEHICLE_LENGTH = 7.5
STOP_POS = 1.0
MAX_ACCEL = 3.0
STANDING_SPEED = 0.1
YELLOW_S = 3.0
ALL_RED_S = 2.0
MIN_GREEN_S = 10.0
JAM_TIMEOUT_S = 300.0  # front vehicle facing a full target this long skips to the target's entry queue once released
_EPS = 1e-9


class SchedulerError(RuntimeError):
    """A signal action arrived before the previous one had persisted long enough."""


class Interval(Enum):
    GREEN = "green"
    YELLOW = "yellow"
    ALL_RED = "all_red"


@dataclass
class Vehicle:
    id: str
    route: tuple[str, ...]
    depart_time: float
    route_index: int = 0
    pos_m: float = 0.0
    speed: float = 0.0
    arrive_time: float | None = None
    waiting_time: float = 0.0
    lane_waiting_time: float = 0.0
    blocked_s: float = 0.0
    moves: tuple[str, ...] = ()

    @property
    def lane(self) -> str:
        return self.route[self.route_index]


@dataclass
class SignalController:
    intersection: str
    phases: dict[str, Phase]
    active_phase: str
    interval: Interval = Interval.GREEN
    interval_elapsed: float = 0.0
    pending_phase: str | None = None
    last_switch: float = -math.inf
    released: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        self._refresh()

    @property
    def target_phase(self) -> str:
        return self.pending_phase if self.pending_phase is not None else self.active_phase

    def signal_of(self, movement: str) -> SignalState:
        """Effective signal shown to ``movement`` right now."""
        if movement not in self.released:
            return SignalState.PROHIBITED
        return self.phases[self.active_phase].signal[movement]

    def _refresh(self) -> None:
        active = green_set(self.phases[self.active_phase])
        if self.interval is Interval.GREEN:
            self.released = active
        else:
            # only movements green in both the old and the new phase keep running
            self.released = active & green_set(self.phases[self.pending_phase])

    def advance(self, dt: float) -> None:
        self.interval_elapsed += dt
        while True:
            if self.interval is Interval.YELLOW and self.interval_elapsed >= YELLOW_S - _EPS:
                self.interval = Interval.ALL_RED
                self.interval_elapsed -= YELLOW_S
            elif self.interval is Interval.ALL_RED and self.interval_elapsed >= ALL_RED_S - _EPS:
                self.interval = Interval.GREEN
                self.interval_elapsed -= ALL_RED_S
                self.active_phase = self.pending_phase
                self.pending_phase = None
                self._refresh()
            else:
                break
        if abs(self.interval_elapsed) < _EPS:
            self.interval_elapsed = 0.0


def apply_action(controller: SignalController, phase: str, clock: float) -> SignalController:
    """Request ``phase``; a change runs yellow then all-red before the new green."""
    if phase not in controller.phases:
        raise NetworkError(f"phase {phase!r} does not belong to intersection {controller.intersection!r}")
    if phase == controller.target_phase:
        return controller
    if clock - controller.last_switch < MIN_GREEN_S - _EPS:
        raise SchedulerError(
            f"{controller.intersection}: switch at t={clock} only "
            f"{clock - controller.last_switch:.3f}s after the previous one"
        )
    controller.pending_phase = phase
    controller.interval = Interval.YELLOW
    controller.interval_elapsed = 0.0
    controller.last_switch = clock
    controller._refresh()
    return controller


@dataclass
class Crossing:
    time: float
    vehicle: str
    movement: str
    signal: SignalState


@dataclass
class SimState:
    network: RoadNetwork
    clock: float = 0.0
    lanes: dict[str, list[Vehicle]] = field(default_factory=dict)
    controllers: dict[str, SignalController] = field(default_factory=dict)
    pending_departures: list[tuple[float, str, Vehicle]] = field(default_factory=list)
    backlog: dict[str, deque[Vehicle]] = field(default_factory=dict)
    transit: dict[str, deque[Vehicle]] = field(default_factory=dict)
    arrived: list[Vehicle] = field(default_factory=list)
    departed: int = 0
    crossings: dict[str, int] = field(default_factory=dict)
    crossing_log: list[Crossing] | None = None
    _next_departure: int = 0

    @property
    def vehicles(self) -> Iterable[Vehicle]:
        for lid in self.network.lanes:
            yield from self.lanes[lid]

    @property
    def on_network(self) -> int:
        return sum(len(v) for v in self.lanes.values()) + sum(len(q) for q in self.transit.values())

    @property
    def unreleased(self) -> int:
        """Scheduled vehicles not yet inserted (future or blocked at the source)."""
        return len(self.pending_departures) - self._next_departure + sum(len(q) for q in self.backlog.values())


def new_state(
    network: RoadNetwork,
    vehicles: Iterable[Vehicle] = (),
    initial_phases: dict[str, str] | None = None,
    log_crossings: bool = False,
) -> SimState:
    """Build an initial state; ``vehicles`` are scheduled by their depart time."""
    controllers = {}
    for vid in network.intersections:
        phases = network.phases_of(vid)
        if not phases:
            continue
        first = (initial_phases or {}).get(vid, phases[0].id)
        controllers[vid] = SignalController(vid, {p.id: p for p in phases}, first)
    state = SimState(
        network=network,
        lanes={lid: [] for lid in network.lanes},
        controllers=controllers,
        backlog={lid: deque() for lid in network.source_lanes},
        transit={lid: deque() for lid in network.lanes},
        crossings={vid: 0 for vid in network.intersections},
        crossing_log=[] if log_crossings else None,
    )
    schedule = []
    for veh in vehicles:
        veh.moves = _route_moves(network, veh.route)
        schedule.append((veh.depart_time, veh.id, veh))
    schedule.sort(key=lambda x: (x[0], x[1]))
    state.pending_departures = schedule
    return state


def _route_moves(network: RoadNetwork, route: tuple[str, ...]) -> tuple[str, ...]:
    moves = []
    for a, b in zip(route, route[1:]):
        m = network.movement_between(a, b)
        if m is None:
            raise NetworkError(f"route step {a!r} -> {b!r} has no movement")
        moves.append(m.id)
    return tuple(moves)


def place_vehicle(state: SimState, veh: Vehicle, lane: str, pos_m: float, speed: float = 0.0) -> None:
    """Put a vehicle directly on a lane (fixtures and tests); keeps lane order."""
    veh.route_index = veh.route.index(lane)
    veh.pos_m = pos_m
    veh.speed = speed
    if not veh.moves:
        veh.moves = _route_moves(state.network, veh.route)
    queue = state.lanes[lane]
    queue.append(veh)
    queue.sort(key=lambda v: v.pos_m)
    state.departed += 1


def step(state: SimState, dt: float = 1.0, on_vehicle: Callable[[float, Vehicle], None] | None = None) -> SimState:
    """Advance the simulation by ``dt`` seconds in place and return ``state``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    net = state.network
    clock = state.clock

    schedule = state.pending_departures
    while state._next_departure < len(schedule) and schedule[state._next_departure][0] <= clock + _EPS:
        veh = schedule[state._next_departure][2]
        state.backlog[veh.route[0]].append(veh)
        state._next_departure += 1
    for queues in (state.transit, state.backlog):
        _insert_heads(state, queues)

    # pre-step tail positions decide entry room, so lane processing order does not matter
    tails = {lid: (q[-1].pos_m if q else 0.0) for lid, q in state.lanes.items()}
    entered: set[str] = set()
    transfers: list[tuple[str, Vehicle]] = []
    leaving: list[Vehicle] = []

    for lid in net.lanes:
        queue = state.lanes[lid]
        if not queue:
            continue
        lane = net.lanes[lid]
        vmax = lane.speed_limit
        keep: list[Vehicle] = []
        leader_pos: float | None = None
        for veh in queue:
            v = min(vmax, veh.speed + MAX_ACCEL * dt)
            if leader_pos is not None:
                v = min(v, max(0.0, (veh.pos_m - leader_pos - HEADWAY) / dt))
                new_pos = veh.pos_m - v * dt
            else:
                new_pos = veh.pos_m - v * dt
                last = veh.route_index == len(veh.route) - 1
                if new_pos <= STOP_POS + _EPS and v > 0:
                    if last:
                        veh.speed = v
                        veh.arrive_time = clock + dt
                        leaving.append(veh)
                        continue
                    move = veh.moves[veh.route_index]
                    target = veh.route[veh.route_index + 1]
                    ctrl = state.controllers[lane.downstream]
                    target_len = net.lanes[target].length_m
                    room = target not in entered and tails[target] <= target_len - HEADWAY + _EPS
                    released = move in ctrl.released
                    if released and (room or veh.blocked_s >= JAM_TIMEOUT_S - _EPS):
                        if state.crossing_log is not None:
                            state.crossing_log.append(Crossing(clock, veh.id, move, ctrl.signal_of(move)))
                        state.crossings[lane.downstream] += 1
                        veh.route_index += 1
                        veh.lane_waiting_time = 0.0
                        veh.blocked_s = 0.0
                        if room:
                            entered.add(target)
                            veh.speed = min(v, net.lanes[target].speed_limit)
                            veh.pos_m = target_len
                            transfers.append((target, veh))
                        else:
                            veh.speed = 0.0
                            state.transit[target].append(veh)
                        continue
                    v = max(0.0, (veh.pos_m - STOP_POS) / dt)
                    new_pos = STOP_POS
                    veh.blocked_s = 0.0 if room else veh.blocked_s + dt
            veh.speed = v
            veh.pos_m = new_pos
            if v < STANDING_SPEED:
                veh.waiting_time += dt
                veh.lane_waiting_time += dt
            keep.append(veh)
            leader_pos = new_pos
        if len(keep) != len(queue):
            state.lanes[lid] = keep

    for target, veh in transfers:
        state.lanes[target].append(veh)
    state.arrived.extend(leaving)

    for ctrl in state.controllers.values():
        ctrl.advance(dt)
    state.clock = clock + dt
    if on_vehicle is not None:
        for veh in state.vehicles:
            on_vehicle(state.clock, veh)
    return state


def _insert_heads(state: SimState, queues: dict[str, deque[Vehicle]]) -> None:
    for lid, queue in queues.items():
        if not queue:
            continue
        length = state.network.lanes[lid].length_m
        lane_q = state.lanes[lid]
        if lane_q and lane_q[-1].pos_m > length - HEADWAY + _EPS:
            continue
        veh = queue.popleft()
        veh.pos_m = length
        veh.speed = 0.0
        lane_q.append(veh)
        if queues is state.backlog:
            veh.route_index = 0
            state.departed += 1


def shortest_path(network: RoadNetwork, origin: str, destination: str) -> list[str] | None:
    """Minimum total-lane-length route from ``origin`` to ``destination`` (both included).

    Returns ``None`` when unreachable.  Equal-length candidates resolve to the
    lexicographically smallest lane-id sequence.
    """
    for lid in (origin, destination):
        if lid not in network.lanes:
            raise NetworkError(f"unknown lane {lid!r}")
    heap: list[tuple[float, tuple[str, ...]]] = [(network.lanes[origin].length_m, (origin,))]
    done: set[str] = set()
    while heap:
        dist, path = heapq.heappop(heap)
        lid = path[-1]
        if lid in done:
            continue
        if lid == destination:
            return list(path)
        done.add(lid)
        for m in network.movements_out_of(lid):
            if m.out_lane not in done:
                heapq.heappush(heap, (dist + network.lanes[m.out_lane].length_m, path + (m.out_lane,)))
    return None


def path_length(network: RoadNetwork, path: Iterable[str]) -> float:
    return sum(network.lanes[lid].length_m for lid in path)


def standing_vehicle_count(state: SimState, threshold: float = STANDING_SPEED) -> tuple[int, dict[str, int]]:
    per_lane = {lid: sum(1 for v in q if v.speed < threshold) for lid, q in state.lanes.items()}
    return sum(per_lane.values()), per_lane


def check_invariants(state: SimState) -> list[str]:
    """Conservation and headway checks; returns violations."""
    out = []
    if state.departed != state.on_network + len(state.arrived):
        out.append(f"conservation: departed {state.departed} != on network {state.on_network} + arrived {len(state.arrived)}")
    for lid, q in state.lanes.items():
        lane = state.network.lanes[lid]
        for a, b in zip(q, q[1:]):
            if b.pos_m - a.pos_m < HEADWAY - 1e-6:
                out.append(f"headway on {lid} at t={state.clock}: {a.id}@{a.pos_m:.3f} {b.id}@{b.pos_m:.3f}")
        for v in q:
            if not (0 < v.pos_m <= lane.length_m + 1e-9):
                out.append(f"position of {v.id} on {lid} out of range: {v.pos_m}")
            if not (0 <= v.speed <= lane.speed_limit + 1e-9):
                out.append(f"speed of {v.id} on {lid} out of range: {v.speed}")
    return out


class TrajectoryWriter:
    """CSV sink for (time_s, vehicle_id, lane_id, pos_m, speed) rows."""

    columns = ("time_s", "vehicle_id", "lane_id", "pos_m", "speed")

    def __init__(self, fh):
        self._w = csv.writer(fh, lineterminator="\n")
        self._w.writerow(self.columns)

    def __call__(self, t: float, veh: Vehicle) -> None:
        self._w.writerow((f"{t:.6g}", veh.id, veh.lane, f"{veh.pos_m:.6g}", f"{veh.speed:.6g}"))
