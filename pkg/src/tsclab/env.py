"""Episode driver: warm-up, 10 s decision ticks, rewards and per-tick traffic metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

from .domainrand import Scenario
from .encoding import DEFAULT_D_PE, DEFAULT_DS, Features, GraphBuilder, StateGraph
from .microsim import STANDING_SPEED, SimState, apply_action, new_state, step
from .reward import RewardConfig, global_reward, reward

DECISION_S = 10.0
WARMUP_S = 100.0
EPISODE_S = 3600.0


@dataclass
class TickMetrics:
    """Traffic measures at one decision tick.

    ``queue`` counts halting vehicles on an intersection's incoming lanes,
    ``standing`` those on all of its lanes; ``waiting`` is the halting time
    accrued on its incoming lanes during the tick and ``throughput`` the
    vehicles it discharged.  The network entries use all lanes and count
    arrivals as throughput; ``travel_time`` is the running mean over arrived
    vehicles (0 before the first arrival).
    """

    time_s: float
    queue: dict[str, int]
    standing: dict[str, int]
    waiting: dict[str, float]
    throughput: dict[str, int]
    travel_time: dict[str, float]
    network_queue: int
    network_standing: int
    network_waiting: float
    network_throughput: int
    network_travel_time: float
    rewards: dict[str, float] = field(default_factory=dict)


class TrafficEnv:
    """One scenario run as a multi-agent decision process."""

    def __init__(self, scenario: Scenario, reward_config: RewardConfig = RewardConfig(),
                 ds: float = DEFAULT_DS, d_pe: int = DEFAULT_D_PE, features: Features = Features(),
                 episode_s: float = EPISODE_S, warmup_s: float = WARMUP_S, decision_s: float = DECISION_S):
        self.scenario = scenario
        self.network = scenario.network
        self.reward_config = reward_config
        self.builder = GraphBuilder(self.network, ds, d_pe, features)
        self.episode_s, self.warmup_s, self.decision_s = episode_s, warmup_s, decision_s
        self.agents = [vid for vid in self.network.intersections if self.network.phases.get(vid)]
        self._incoming = {vid: self.network.intersections[vid].incoming for vid in self.agents}
        self._lanes = {vid: self.network.intersections[vid].lanes for vid in self.agents}
        self.state: SimState | None = None

    @property
    def n_phases(self) -> dict[str, int]:
        return {vid: len(self.network.phases_of(vid)) for vid in self.agents}

    def reset(self) -> dict[str, StateGraph]:
        self.state = new_state(self.network, self.scenario.vehicles())
        self._arrived_seen = 0
        self._tt_sum = 0.0
        self._tt_by = {vid: [0.0, 0] for vid in self.agents}
        for _ in range(int(round(self.warmup_s))):
            step(self.state)
        self._collect_arrivals()
        return self.observe()

    @property
    def done(self) -> bool:
        return self.state.clock >= self.episode_s - 1e-9

    def observe(self) -> dict[str, StateGraph]:
        return self.builder.build_all(self.state)

    def _collect_arrivals(self) -> int:
        new = self.state.arrived[self._arrived_seen:]
        net = self.network
        for veh in new:
            tt = veh.arrive_time - veh.depart_time
            self._tt_sum += tt
            for owner in {net.movements[m].owner for m in veh.moves}:
                if owner in self._tt_by:
                    self._tt_by[owner][0] += tt
                    self._tt_by[owner][1] += 1
        self._arrived_seen = len(self.state.arrived)
        return len(new)

    def rewards(self) -> dict[str, float]:
        return {vid: reward(self.state, vid, self.reward_config) for vid in self.agents}

    def team_rewards(self) -> dict[str, float]:
        return global_reward(self.rewards(), self.reward_config.global_mode)

    def step(self, actions: dict[str, int]) -> TickMetrics:
        """Apply one phase index per agent, then simulate one decision interval."""
        st = self.state
        for vid, a in actions.items():
            phases = self.network.phases_of(vid)
            if not 0 <= a < len(phases):
                raise IndexError(f"{vid}: action {a} outside 0..{len(phases) - 1}")
            apply_action(st.controllers[vid], phases[a].id, st.clock)
        crossings0 = dict(st.crossings)
        waiting = {vid: 0.0 for vid in self.agents}
        net_waiting = 0.0
        n_sub = int(round(self.decision_s))
        for _ in range(n_sub):
            step(st)
            for vid in self.agents:
                waiting[vid] += sum(1 for lid in self._incoming[vid] for v in st.lanes[lid] if v.speed < STANDING_SPEED)
            net_waiting += sum(1 for v in st.vehicles if v.speed < STANDING_SPEED)
        arrivals = self._collect_arrivals()
        return self._metrics(waiting, net_waiting, arrivals, crossings0)

    def _metrics(self, waiting, net_waiting, arrivals, crossings0) -> TickMetrics:
        st = self.state

        def halting(lanes) -> int:
            return sum(1 for lid in lanes for v in st.lanes[lid] if v.speed < STANDING_SPEED)

        queue = {vid: halting(self._incoming[vid]) for vid in self.agents}
        standing = {vid: halting(self._lanes[vid]) for vid in self.agents}
        n_arr = len(st.arrived)
        tt = {vid: (s / n if n else 0.0) for vid, (s, n) in self._tt_by.items()}
        return TickMetrics(
            time_s=st.clock,
            queue=queue,
            standing=standing,
            waiting=waiting,
            throughput={vid: st.crossings[vid] - crossings0[vid] for vid in self.agents},
            travel_time=tt,
            network_queue=sum(queue.values()),
            network_standing=halting(self.network.lanes),
            network_waiting=net_waiting,
            network_throughput=arrivals,
            network_travel_time=self._tt_sum / n_arr if n_arr else 0.0,
            rewards=self.rewards(),
        )
