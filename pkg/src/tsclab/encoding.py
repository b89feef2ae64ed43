"""Per-intersection state graphs: segment densities, positional codes, priors, edge features."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .microsim import VEHICLE_LENGTH, SimState
from .network import Lane, RoadNetwork, jaccard

DEFAULT_DS = 10.0
DEFAULT_D_PE = 16


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class Features:
    """Which optional inputs reach the encoder; off means zeroed, topology unchanged."""

    pe: bool = True
    gamma: bool = True
    jaccard: bool = True
    prior: bool = True

    @classmethod
    def ablate(cls, names) -> "Features":
        names = {n.strip() for n in names if n.strip()}
        unknown = names - {"pe", "gamma", "jaccard", "prior"}
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        return cls(**{n: False for n in names})


def n_segments(length_m: float, ds: float) -> int:
    return int(math.floor(length_m / ds + 1e-9))


def partition(lane: Lane, ds: float = DEFAULT_DS) -> list[tuple[float, float]]:
    """Segment bounds ``(near, far]`` in metres from the lane's downstream end; the remainder is dropped."""
    if ds < VEHICLE_LENGTH or ds > lane.length_m + 1e-9:
        raise EncodingError(
            f"segment length {ds} outside [{VEHICLE_LENGTH}, {lane.length_m}] for lane {lane.id!r}"
        )
    return [(k * ds, (k + 1) * ds) for k in range(n_segments(lane.length_m, ds))]


def segment_index(pos_m: float, ds: float) -> int:
    # a vehicle on a boundary belongs to the segment nearer the intersection
    return max(0, math.ceil(pos_m / ds - 1e-12) - 1)


def lane_densities(state: SimState, lane_id: str, ds: float = DEFAULT_DS) -> np.ndarray:
    n = n_segments(state.network.lanes[lane_id].length_m, ds)
    counts = np.zeros(n)
    for veh in state.lanes[lane_id]:
        k = segment_index(veh.pos_m, ds)
        if k < n:
            counts[k] += 1
    return counts / ds


def segment_density(state: SimState, lane_id: str, segment: int, ds: float = DEFAULT_DS) -> float:
    return float(lane_densities(state, lane_id, ds)[segment])


def transition_prior(state: SimState, lane_id: str, ds: float = DEFAULT_DS, _cache=None) -> float:
    """Front density of lanes feeding ``lane_id`` minus that of the lanes it drains into."""
    net = state.network

    def front(lid: str) -> float:
        if _cache is not None:
            if lid not in _cache:
                _cache[lid] = lane_densities(state, lid, ds)
            return float(_cache[lid][0])
        return segment_density(state, lid, 0, ds)

    inflow = sum(front(m.in_lane) for m in net.movements_into(lane_id))
    outflow = sum(front(m.out_lane) for m in net.movements_out_of(lane_id))
    return inflow - outflow


def sinusoid(index: int, dim: int) -> np.ndarray:
    k = np.arange(dim)
    freq = 1.0 / 10000.0 ** (2 * (k // 2) / dim)
    angle = index * freq
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


def positional_encoding(segment: int, lane: int, d_pe: int = DEFAULT_D_PE) -> np.ndarray:
    """Within-lane code followed by across-lane code, ``d_pe // 2`` each."""
    if d_pe % 2:
        raise EncodingError(f"positional encoding width must be even, got {d_pe}")
    half = d_pe // 2
    return np.concatenate([sinusoid(segment, half), sinusoid(lane, half)])


@dataclass
class StateGraph:
    """Hierarchical graph of one intersection.

    Segment rows are grouped by lane; ``seg_lane[s]`` is the lane-local index of
    segment ``s``.  Movement ``m`` aggregates lanes ``move_in[m]`` and
    ``move_out[m]``.  ``gamma`` is |M| x |P| and ``jacc`` is |P| x |P|.
    """

    intersection: str
    seg_feat: np.ndarray
    seg_lane: np.ndarray
    lane_ids: list[str]
    move_in: np.ndarray
    move_out: np.ndarray
    move_ids: list[str]
    gamma: np.ndarray
    phase_flag: np.ndarray
    jacc: np.ndarray
    phase_ids: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def n_segments(self) -> int:
        return self.seg_feat.shape[0]

    @property
    def n_movements(self) -> int:
        return len(self.move_ids)

    @property
    def n_phases(self) -> int:
        return len(self.phase_ids)

    def permuted(self, move_perm=None, phase_perm=None) -> "StateGraph":
        """Same graph with movement and/or phase nodes reordered."""
        mp = np.arange(self.n_movements) if move_perm is None else np.asarray(move_perm)
        pp = np.arange(self.n_phases) if phase_perm is None else np.asarray(phase_perm)
        return StateGraph(
            self.intersection,
            self.seg_feat,
            self.seg_lane,
            self.lane_ids,
            self.move_in[mp],
            self.move_out[mp],
            [self.move_ids[i] for i in mp],
            self.gamma[np.ix_(mp, pp)],
            self.phase_flag[pp],
            self.jacc[np.ix_(pp, pp)],
            [self.phase_ids[i] for i in pp],
            dict(self.meta),
        )

    def dump(self) -> str:
        """Stable text rendering for golden-file comparisons."""
        doc = {
            "intersection": self.intersection,
            "lanes": self.lane_ids,
            "segments": [
                {"lane": int(l), "features": [round(float(x), 9) for x in row]}
                for l, row in zip(self.seg_lane, self.seg_feat)
            ],
            "movements": [
                {"id": mid, "in": int(i), "out": int(o)}
                for mid, i, o in zip(self.move_ids, self.move_in, self.move_out)
            ],
            "phases": [
                {"id": pid, "active": int(f)} for pid, f in zip(self.phase_ids, self.phase_flag)
            ],
            "gamma": self.gamma.astype(int).tolist(),
            "jaccard": [[round(float(x), 9) for x in row] for row in self.jacc],
        }
        return json.dumps(doc, indent=1)


class GraphBuilder:
    """Caches the static part of each intersection's graph; only densities change per call."""

    def __init__(self, network: RoadNetwork, ds: float = DEFAULT_DS, d_pe: int = DEFAULT_D_PE,
                 features: Features = Features()):
        if d_pe % 2:
            raise EncodingError(f"positional encoding width must be even, got {d_pe}")
        self.network, self.ds, self.d_pe, self.features = network, ds, d_pe, features
        self._static = {vid: self._build_static(vid) for vid in network.intersections
                        if network.phases.get(vid)}

    @property
    def feature_dim(self) -> int:
        return 2 + self.d_pe

    def _build_static(self, vid: str) -> dict:
        net = self.network
        v = net.intersections[vid]
        lane_ids = list(v.lanes)
        for lid in lane_ids:
            partition(net.lanes[lid], self.ds)
        nseg = [n_segments(net.lanes[lid].length_m, self.ds) for lid in lane_ids]
        pe = np.zeros((sum(nseg), self.d_pe))
        seg_lane = np.repeat(np.arange(len(lane_ids)), nseg)
        row = 0
        for j, n in enumerate(nseg):
            for k in range(n):
                pe[row] = positional_encoding(k, j, self.d_pe)
                row += 1
        if not self.features.pe:
            pe[:] = 0.0
        index = {lid: j for j, lid in enumerate(lane_ids)}
        moves = net.movements_of(vid)
        phases = net.phases_of(vid)
        gamma = np.array([[float(p.signal[m.id]) for p in phases] for m in moves]).reshape(len(moves), len(phases))
        if not self.features.gamma:
            gamma[:] = 0.0
        jacc = np.array([[jaccard(a, b) for b in phases] for a in phases])
        if not self.features.jaccard:
            jacc[:] = 0.0
        return {
            "lane_ids": lane_ids,
            "nseg": nseg,
            "pe": pe,
            "seg_lane": seg_lane,
            "move_in": np.array([index[m.in_lane] for m in moves], dtype=np.int64),
            "move_out": np.array([index[m.out_lane] for m in moves], dtype=np.int64),
            "move_ids": [m.id for m in moves],
            "gamma": gamma,
            "jacc": jacc,
            "phase_ids": [p.id for p in phases],
        }

    def build(self, state: SimState, vid: str, _cache: dict | None = None) -> StateGraph:
        st = self._static[vid]
        cache = {} if _cache is None else _cache
        dens, priors = [], []
        for lid in st["lane_ids"]:
            if lid not in cache:
                cache[lid] = lane_densities(state, lid, self.ds)
            dens.append(cache[lid])
            priors.append(transition_prior(state, lid, self.ds, cache) if self.features.prior else 0.0)
        rho = np.concatenate(dens)
        prior = np.repeat(np.asarray(priors), st["nseg"])
        feat = np.concatenate([rho[:, None], st["pe"], prior[:, None]], axis=1)
        ctrl = state.controllers[vid]
        flag = np.array([1.0 if pid == ctrl.active_phase else 0.0 for pid in st["phase_ids"]])
        return StateGraph(
            vid, feat, st["seg_lane"], st["lane_ids"], st["move_in"], st["move_out"],
            st["move_ids"], st["gamma"], flag, st["jacc"], st["phase_ids"],
        )

    def build_all(self, state: SimState) -> dict[str, StateGraph]:
        cache: dict = {}
        return {vid: self.build(state, vid, cache) for vid in self._static}


def build_state_graph(state: SimState, intersection: str, ds: float = DEFAULT_DS,
                      d_pe: int = DEFAULT_D_PE, features: Features = Features()) -> StateGraph:
    return GraphBuilder(state.network, ds, d_pe, features).build(state, intersection)
