"""Intersection rewards: classic pressure and the log-distance pressure."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .microsim import SimState
from .network import Movement, Phase, SignalState

EPSILON = 1e-6


class RewardMode(str, enum.Enum):
    PRESSURE = "pressure"
    LOG_DISTANCE = "log-distance"


class GlobalMode(str, enum.Enum):
    TEAM_AVERAGE = "team-average"
    IDENTICAL = "identical"


@dataclass(frozen=True)
class RewardConfig:
    epsilon: float = EPSILON
    mode: RewardMode = RewardMode.LOG_DISTANCE
    global_mode: GlobalMode = GlobalMode.TEAM_AVERAGE

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1e-2:
            raise ValueError(f"epsilon must be a small positive number, got {self.epsilon}")
        object.__setattr__(self, "mode", RewardMode(self.mode))
        object.__setattr__(self, "global_mode", GlobalMode(self.global_mode))


def lane_density(state: SimState, lane_id: str) -> float:
    return len(state.lanes[lane_id]) / state.network.lanes[lane_id].length_m


def pressure(state: SimState, movement: Movement) -> float:
    """Vehicles per metre on the incoming lane minus those on the outgoing lane."""
    return lane_density(state, movement.in_lane) - lane_density(state, movement.out_lane)


def log_energy(state: SimState, lane_id: str, epsilon: float = EPSILON) -> float:
    """Sum of ``log(c + eps)`` over the lane's vehicles, ``c`` the distance to the
    downstream end divided by the lane length."""
    length = state.network.lanes[lane_id].length_m
    return math.fsum(math.log(v.pos_m / length + epsilon) for v in state.lanes[lane_id])


def log_pressure(state: SimState, intersection: str, epsilon: float = EPSILON) -> float:
    net = state.network
    cache: dict[str, float] = {}

    def norm_energy(lid: str) -> float:
        if lid not in cache:
            cache[lid] = log_energy(state, lid, epsilon) / net.lanes[lid].length_m
        return cache[lid]

    return math.fsum(norm_energy(m.in_lane) - norm_energy(m.out_lane) for m in net.movements_of(intersection))


def total_pressure(state: SimState, intersection: str) -> float:
    return math.fsum(pressure(state, m) for m in state.network.movements_of(intersection))


def reward(state: SimState, intersection: str, config: RewardConfig = RewardConfig()) -> float:
    """Negated imbalance; zero exactly when the intersection is balanced."""
    if config.mode is RewardMode.LOG_DISTANCE:
        value = log_pressure(state, intersection, config.epsilon)
    else:
        value = total_pressure(state, intersection)
    return -abs(value)


def global_reward(rewards: Mapping[str, float] | Sequence[float],
                  mode: GlobalMode = GlobalMode.TEAM_AVERAGE) -> dict[str, float] | list[float]:
    """Per-agent training signal derived from the per-agent rewards."""
    mode = GlobalMode(mode)
    keyed = isinstance(rewards, Mapping)
    values = list(rewards.values()) if keyed else list(rewards)
    if not values:
        raise ValueError("global reward of an empty agent set")
    if mode is GlobalMode.TEAM_AVERAGE:
        mean = math.fsum(values) / len(values)
        out = [mean] * len(values)
    else:
        out = list(values)
    return dict(zip(rewards.keys(), out)) if keyed else out


def phase_pressure(state: SimState, phase: Phase) -> float:
    """Summed pressure of the movements that have right of way during ``phase``."""
    net = state.network
    return math.fsum(
        pressure(state, net.movements[mid]) for mid, s in phase.signal.items() if s != SignalState.PROHIBITED
    )


def phase_pressures(state: SimState, intersection: str) -> np.ndarray:
    return np.array([phase_pressure(state, p) for p in state.network.phases_of(intersection)])
