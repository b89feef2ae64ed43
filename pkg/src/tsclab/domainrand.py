"""Random road networks and Beta-distributed traffic demand."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betaincinv

from .microsim import Vehicle, shortest_path
from .network import (
    Intersection,
    Lane,
    Movement,
    NetworkError,
    Phase,
    RoadNetwork,
    SignalState,
    validate,
)

# sides are indexed clockwise from north
SIDES = ("N", "E", "S", "W")
_OFFSETS = ((-1, 0), (0, 1), (1, 0), (0, -1))
THROUGH, RIGHT, LEFT = "through", "right", "left"


@dataclass
class DomainConfig:
    grid_rows: tuple[int, int] = (1, 1)
    grid_cols: tuple[int, int] = (1, 1)
    lane_length_range: tuple[float, float] = (75.0, 300.0)
    approaches_per_intersection: tuple[int, int] = (3, 4)
    lanes_per_approach: tuple[int, int] = (1, 2)
    vehicle_pool: int | tuple[int, int] = (600, 1800)
    flow_count_range: tuple[int, int] = (4, 12)
    t_max: float = 3600.0
    speed_limit: float = 13.89
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("grid_rows", "grid_cols", "lane_length_range", "approaches_per_intersection",
                     "lanes_per_approach", "flow_count_range"):
            setattr(self, name, tuple(getattr(self, name)))
        if isinstance(self.vehicle_pool, (list, tuple)):
            self.vehicle_pool = tuple(self.vehicle_pool)

    def check(self, ds: float = 10.0) -> None:
        for name in ("grid_rows", "grid_cols", "lane_length_range", "approaches_per_intersection",
                     "lanes_per_approach", "flow_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        pool = self.vehicle_pool if isinstance(self.vehicle_pool, tuple) else (self.vehicle_pool,) * 2
        if pool[0] > pool[1] or pool[0] < 0:
            raise ValueError(f"vehicle_pool: bad range {pool}")
        if self.grid_rows[0] < 1 or self.grid_cols[0] < 1:
            raise ValueError("grid needs at least one row and column")
        if self.lane_length_range[0] < ds:
            raise ValueError(f"minimum lane length {self.lane_length_range[0]} below segment length {ds}")
        a_lo, a_hi = self.approaches_per_intersection
        if a_lo < 2 or a_hi > 4:
            raise ValueError("approaches per intersection must lie in 2..4")
        if self.lanes_per_approach[0] < 1:
            raise ValueError("at least one lane per approach")
        if self.flow_count_range[0] < 1:
            raise ValueError("at least one flow")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainConfig":
        return cls(**d)


@dataclass
class FlowSpec:
    origin: str
    destination: str
    vehicle_count: int
    alpha: float
    beta: float
    departures: list[float] = field(default_factory=list)
    route: list[str] = field(default_factory=list)


def _uniform_int(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def sample_network(config: DomainConfig, rng: np.random.Generator) -> RoadNetwork:
    """Rectangular grid with randomised size, approaches, lane counts and lane lengths."""
    config.check()
    rows = _uniform_int(rng, config.grid_rows)
    cols = _uniform_int(rng, config.grid_cols)
    vid = lambda r, c: f"I{r}_{c}"  # noqa: E731

    # which sides of every intersection carry a road
    sides: dict[tuple[int, int], list[int]] = {}
    for r in range(rows):
        for c in range(cols):
            inner = [d for d, (dr, dc) in enumerate(_OFFSETS) if 0 <= r + dr < rows and 0 <= c + dc < cols]
            outer = [d for d in range(4) if d not in inner]
            k = _uniform_int(rng, config.approaches_per_intersection)
            k = min(4, max(k, len(inner), 2))
            extra = sorted(rng.choice(outer, size=k - len(inner), replace=False).tolist()) if k > len(inner) else []
            sides[(r, c)] = sorted(inner + extra)

    lanes: dict[str, Lane] = {}
    # (intersection, side) -> lane ids ordered rightmost first
    incoming: dict[tuple[str, int], list[str]] = {}
    outgoing: dict[tuple[str, int], list[str]] = {}

    def road(ids_from: str | None, ids_to: str | None, name: str, min_lanes: int = 1) -> list[str]:
        length = float(rng.uniform(*config.lane_length_range))
        n = max(min_lanes, _uniform_int(rng, config.lanes_per_approach))
        out = []
        for k in range(n):
            lid = f"{name}.{k}"
            lanes[lid] = Lane(lid, length, ids_from, ids_to, config.speed_limit)
            out.append(lid)
        return out

    for r in range(rows):
        for c in range(cols):
            v = vid(r, c)
            for d in sides[(r, c)]:
                dr, dc = _OFFSETS[d]
                nr, nc = r + dr, c + dc
                if 0 <= nr < rows and 0 <= nc < cols:
                    # the road from neighbour into v is created here; v's outgoing one at the neighbour
                    u = vid(nr, nc)
                    incoming[(v, d)] = road(u, v, f"{u}>{v}", _min_lanes(sides[(r, c)], d))
                    outgoing[(u, (d + 2) % 4)] = incoming[(v, d)]
                else:
                    incoming[(v, d)] = road(None, v, f"in.{v}.{SIDES[d]}", _min_lanes(sides[(r, c)], d))
                    outgoing[(v, d)] = road(v, None, f"out.{v}.{SIDES[d]}")

    intersections: dict[str, Intersection] = {}
    movements: dict[str, Movement] = {}
    phases: dict[str, list[Phase]] = {}
    for r in range(rows):
        for c in range(cols):
            v = vid(r, c)
            present = sides[(r, c)]
            intersections[v] = Intersection(
                v,
                tuple(l for d in present for l in incoming[(v, d)]),
                tuple(l for d in present for l in outgoing[(v, d)]),
            )
            turn_of: dict[str, tuple[int, str]] = {}
            for a in present:
                for mv in _lane_movements(v, a, present, incoming, outgoing):
                    movements[mv[0].id] = mv[0]
                    turn_of[mv[0].id] = (a, mv[1])
            phases[v] = _phases_for(v, present, turn_of)

    net = RoadNetwork(lanes, intersections, movements, phases)
    problems = validate(net)
    if problems:
        raise NetworkError("generated network is invalid:\n  " + "\n  ".join(problems))
    return net


def _min_lanes(present: list[int], a: int) -> int:
    """Two lanes when the approach needs its own left-turn lane.

    Through and left movements of a two-sided axis are never green together,
    so sharing one lane would let a waiting left-turner block through traffic.
    """
    return 2 if (a + 2) % 4 in present and (a + 1) % 4 in present else 1


def _lane_movements(v, a, present, incoming, outgoing):
    in_lanes = incoming[(v, a)]
    n = len(in_lanes)
    targets = {THROUGH: (a + 2) % 4, RIGHT: (a + 3) % 4, LEFT: (a + 1) % 4}
    targets = {t: b for t, b in targets.items() if b in present}
    # lane 0 is rightmost: right+through on the right, a dedicated left lane on the left
    if n == 1:
        allowed = {in_lanes[0]: set(targets)}
    else:
        allowed = {l: {THROUGH} for l in in_lanes}
        allowed[in_lanes[0]] |= {RIGHT}
        if LEFT in targets:
            allowed[in_lanes[-1]] = {LEFT}
        for l in in_lanes:
            allowed[l] &= set(targets)
            if not allowed[l]:
                allowed[l] = set(targets)
    out = []
    for turn in (RIGHT, THROUGH, LEFT):
        if turn not in targets:
            continue
        src = [l for l in in_lanes if turn in allowed[l]]
        dst = outgoing[(v, targets[turn])]
        if turn == LEFT:
            dst = dst[::-1]
        if not src:
            continue
        pairs = []
        for j in range(max(len(src), len(dst))):
            p = (src[min(j, len(src) - 1)], dst[min(j, len(dst) - 1)])
            if p not in pairs:
                pairs.append(p)
        for i, o in pairs:
            out.append((Movement(f"{v}:{i}>{o}", i, o, v), turn))
    return out


def _phases_for(v: str, present: list[int], turn_of: dict[str, tuple[int, str]]) -> list[Phase]:
    P, Q, X = SignalState.PROTECTED, SignalState.PERMITTED, SignalState.PROHIBITED
    specs = []
    for axis, name in (((0, 2), "NS"), ((1, 3), "EW")):
        here = [s for s in axis if s in present]
        if len(here) == 2:
            specs.append((f"{name}-through", lambda a, t, ax=axis: P if a in ax and t == THROUGH else
                          Q if a in ax and t == RIGHT else X))
            specs.append((f"{name}-left", lambda a, t, ax=axis: P if a in ax and t == LEFT else
                          Q if a in ax and t == RIGHT else X))
        elif len(here) == 1:
            specs.append((f"{name}-{SIDES[here[0]]}", lambda a, t, s=here[0]: P if a == s else X))
    out = []
    for name, rule in specs:
        signal = {mid: rule(a, t) for mid, (a, t) in turn_of.items()}
        if any(s != X for s in signal.values()):
            out.append(Phase(f"{v}:{name}", v, signal))
    return out


def sample_flows(network: RoadNetwork, config: DomainConfig, rng: np.random.Generator) -> list[FlowSpec]:
    """Flows with random OD pairs, equal split of the vehicle pool, Beta departures."""
    sources, sinks = network.source_lanes, network.sink_lanes
    if not sources or not sinks:
        raise NetworkError("network needs at least one source and one sink lane")
    routes: dict[tuple[str, str], list[str] | None] = {}

    def route(o, d):
        if (o, d) not in routes:
            routes[(o, d)] = shortest_path(network, o, d)
        return routes[(o, d)]

    if not any(route(o, d) for o in sources for d in sinks):
        raise NetworkError("no origin-destination pair is connected")
    n_flows = _uniform_int(rng, config.flow_count_range)
    pool = config.vehicle_pool
    total = _uniform_int(rng, pool) if isinstance(pool, tuple) else int(pool)
    counts = [total // n_flows + (1 if i < total % n_flows else 0) for i in range(n_flows)]

    flows = []
    for count in counts:
        while True:
            o = sources[int(rng.integers(len(sources)))]
            d = sinks[int(rng.integers(len(sinks)))]
            path = route(o, d)
            if path:
                break
        alpha = float(rng.uniform(1.0, 10.0))
        beta = float(rng.uniform(1.0, 10.0))
        key = int(rng.integers(2**63))
        departures = beta_departures(alpha, beta, count, config.t_max, key)
        flows.append(FlowSpec(o, d, count, alpha, beta, departures.tolist(), list(path)))
    return flows


def beta_departures(alpha: float, beta: float, count: int, t_max: float, key: int) -> np.ndarray:
    """Sorted ``t_max * b`` with ``b ~ Beta(alpha, beta)``, by inverse CDF on a Philox stream."""
    u = np.random.Generator(np.random.Philox(key=key)).random(count)
    return np.sort(t_max * betaincinv(alpha, beta, u))


def flow_vehicles(flows: list[FlowSpec]) -> list[Vehicle]:
    out = []
    for i, f in enumerate(flows):
        for k, t in enumerate(f.departures):
            out.append(Vehicle(f"f{i}.{k}", tuple(f.route), float(t)))
    return out


@dataclass
class Scenario:
    network: RoadNetwork
    flows: list[FlowSpec]
    config: DomainConfig

    def vehicles(self) -> list[Vehicle]:
        return flow_vehicles(self.flows)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.network.save(d / "network.json")
        (d / "flows.json").write_text(json.dumps([asdict(f) for f in self.flows], indent=1))
        (d / "config.json").write_text(json.dumps(self.config.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "Scenario":
        d = Path(directory)
        net = RoadNetwork.load(d / "network.json")
        flows = [FlowSpec(**f) for f in json.loads((d / "flows.json").read_text())]
        config = DomainConfig.from_dict(json.loads((d / "config.json").read_text()))
        return cls(net, flows, config)


def generate_scenario(config: DomainConfig) -> Scenario:
    """Network and flows drawn from one generator seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    net = sample_network(config, rng)
    return Scenario(net, sample_flows(net, config, rng), config)
