from __future__ import annotations

import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import P, Q, X, corridor, cross, state_with
from tsclab.microsim import (ALL_RED_S, HEADWAY, STOP_POS, YELLOW_S, Interval, SchedulerError,
                             SignalController, TrajectoryWriter, Vehicle, apply_action,
                             check_invariants, new_state, path_length, place_vehicle, shortest_path,
                             standing_vehicle_count, step)
from tsclab.network import NetworkError, Phase, SignalState


def _controller():
    phases = {
        "a": Phase("a", "V", {"m1": P, "m2": Q, "m3": X}),
        "b": Phase("b", "V", {"m1": X, "m2": P, "m3": P}),
    }
    return SignalController("V", phases, "a")


class TestStep:
    def test_empty_network_only_advances_clock(self):
        st_ = new_state(cross())
        step(st_, 2.5)
        assert st_.clock == 2.5
        assert st_.on_network == 0 and st_.arrived == [] and st_.departed == 0

    @pytest.mark.parametrize("dt", [0.0, -1.0])
    def test_non_positive_dt_raises(self, dt):
        with pytest.raises(ValueError):
            step(new_state(cross()), dt)

    def test_free_flow_trajectory(self):
        # hand integration: +3 m/s per second up to 13.89 m/s, position falls by the new speed
        st_ = new_state(cross())
        place_vehicle(st_, Vehicle("a", ("in_N", "out_S"), 0.0), "in_N", 100.0)
        expected = [97.0, 91.0, 82.0, 70.0, 56.11, 42.22, 28.33, 14.44]
        for want in expected:
            step(st_)
            (veh,) = st_.vehicles
            assert veh.lane == "in_N" and veh.pos_m == pytest.approx(want, abs=1e-9)
        step(st_)  # would reach 0.55 m, below the stop threshold, so it crosses
        (veh,) = st_.vehicles
        assert veh.lane == "out_S" and veh.pos_m == 100.0 and veh.speed == pytest.approx(13.89)

    def test_kinematic_bound(self):
        net = cross()
        st_ = new_state(net)
        place_vehicle(st_, Vehicle("a", ("in_N", "out_S"), 0.0), "in_N", 80.0, speed=10.0)
        step(st_)
        (veh,) = st_.vehicles
        assert 0 <= 80.0 - veh.pos_m <= net.lanes["in_N"].speed_limit

    def test_red_light_holds_at_stop_line(self):
        st_ = new_state(cross())  # NS green, so the east approach faces red
        place_vehicle(st_, Vehicle("a", ("in_E", "out_W"), 0.0), "in_E", STOP_POS)
        for _ in range(20):
            step(st_)
            (veh,) = st_.vehicles
            assert veh.lane == "in_E" and veh.pos_m == STOP_POS and veh.speed == 0.0

    def test_approaching_red_stops_at_threshold(self):
        st_ = new_state(cross())
        place_vehicle(st_, Vehicle("a", ("in_E", "out_W"), 0.0), "in_E", 60.0, speed=13.0)
        for _ in range(30):
            step(st_)
        (veh,) = st_.vehicles
        assert veh.pos_m == STOP_POS and veh.speed == 0.0

    def test_arrival_recorded_once_and_removed(self):
        st_ = new_state(cross(), [Vehicle("a", ("in_N", "out_S"), 0.0)])
        for _ in range(40):
            step(st_)
        assert [v.id for v in st_.arrived] == ["a"]
        assert st_.arrived[0].arrive_time is not None and st_.on_network == 0

    def test_queue_respects_headway(self):
        st_ = state_with(cross(), {"in_E": [1.0, 20.0, 40.0, 60.0]})
        for _ in range(30):
            step(st_)
        pos = [v.pos_m for v in st_.lanes["in_E"]]
        assert pos == pytest.approx([STOP_POS + k * HEADWAY for k in range(4)])
        assert check_invariants(st_) == []


class TestSignals:
    def test_same_phase_is_identity(self):
        c = _controller()
        before = (c.active_phase, c.interval, c.interval_elapsed, c.pending_phase, c.last_switch)
        apply_action(c, "a", 50.0)
        assert (c.active_phase, c.interval, c.interval_elapsed, c.pending_phase, c.last_switch) == before

    def test_green_on_new_phase_after_five_seconds(self):
        c = _controller()
        apply_action(c, "b", 20.0)
        t = 20.0
        while c.active_phase != "b":
            c.advance(1.0)
            t += 1.0
        assert t == 20.0 + YELLOW_S + ALL_RED_S == 25.0
        assert c.interval is Interval.GREEN

    def test_change_interval_sequence(self):
        c = _controller()
        apply_action(c, "b", 0.0)
        seen = []
        for _ in range(6):
            seen.append(c.interval)
            c.advance(1.0)
        assert seen == [Interval.YELLOW] * 3 + [Interval.ALL_RED] * 2 + [Interval.GREEN]

    def test_only_shared_green_runs_during_change(self):
        c = _controller()
        assert c.released == {"m1", "m2"}
        apply_action(c, "b", 0.0)
        assert c.released == {"m2"}
        assert c.signal_of("m1") == SignalState.PROHIBITED
        for _ in range(5):
            c.advance(1.0)
        assert c.released == {"m2", "m3"}

    def test_actions_ten_seconds_apart_accepted(self):
        c = _controller()
        apply_action(c, "b", 0.0)
        for _ in range(10):
            c.advance(1.0)
        apply_action(c, "a", 10.0)
        assert c.pending_phase == "a"

    def test_premature_action_raises(self):
        c = _controller()
        apply_action(c, "b", 0.0)
        for _ in range(6):
            c.advance(1.0)
        with pytest.raises(SchedulerError):
            apply_action(c, "a", 6.0)

    def test_foreign_phase_raises(self):
        with pytest.raises(NetworkError):
            apply_action(_controller(), "zzz", 0.0)

    def test_no_red_light_crossings(self):
        net = cross()
        rng = np.random.default_rng(1)
        vehicles = [Vehicle(f"v{k}", (f"in_{s}", f"out_{t}"), float(rng.uniform(0, 300)))
                    for k, (s, t) in enumerate(itertools.islice(itertools.cycle(
                        [(s, t) for s in "NESW" for t in "NESW" if s != t]), 200))]
        st_ = new_state(net, vehicles, log_crossings=True)
        ctrl = st_.controllers["C"]
        for t in range(600):
            if t % 10 == 0:
                apply_action(ctrl, ["C:NS", "C:EW"][int(rng.integers(2))], st_.clock)
            step(st_)
            assert check_invariants(st_) == []
        assert st_.crossing_log
        assert all(c.signal != SignalState.PROHIBITED for c in st_.crossing_log)


class TestInvariants:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0, 600), min_size=1, max_size=60))
    def test_conservation_headway_and_no_teleport(self, departs):
        net = corridor(3, 80.0)
        route = tuple(f"e{k}" for k in range(4))
        st_ = new_state(net, [Vehicle(f"v{i}", route, t) for i, t in enumerate(departs)])
        for _ in range(200):
            before = {v.id: (v.lane, v.pos_m) for v in st_.vehicles}
            step(st_)
            assert check_invariants(st_) == []
            for v in st_.vehicles:
                if v.id in before and before[v.id][0] == v.lane:
                    assert 0 <= before[v.id][1] - v.pos_m <= net.lanes[v.lane].speed_limit + 1e-9

    def test_determinism(self):
        def run():
            net = cross()
            vs = [Vehicle(f"v{k}", (f"in_{s}", f"out_{t}"), float(3 * k))
                  for k, (s, t) in enumerate([(s, t) for s in "NESW" for t in "NESW" if s != t] * 4)]
            st_ = new_state(net, vs)
            buf = io.StringIO()
            w = TrajectoryWriter(buf)
            for t in range(300):
                if t % 20 == 0:
                    apply_action(st_.controllers["C"], ["C:NS", "C:EW"][(t // 20) % 2], st_.clock)
                step(st_, on_vehicle=w)
            return buf.getvalue()

        a, b = run(), run()
        assert a == b and a.count("\n") > 100


class TestRouting:
    def test_origin_is_destination(self):
        assert shortest_path(cross(), "in_N", "in_N") == ["in_N"]

    def test_corridor_unique_path(self):
        assert shortest_path(corridor(3), "e0", "e3") == ["e0", "e1", "e2", "e3"]
        assert path_length(corridor(3), ["e0", "e1"]) == 200.0

    def test_unreachable(self):
        assert shortest_path(cross(), "out_N", "in_N") is None

    def test_unknown_lane_raises(self):
        with pytest.raises(NetworkError):
            shortest_path(cross(), "in_N", "bogus")


class TestStanding:
    def test_free_flow_is_zero(self):
        st_ = new_state(cross())
        for k, s in enumerate("NESW"):
            place_vehicle(st_, Vehicle(f"v{k}", (f"in_{s}",), 0.0), f"in_{s}", 50.0, speed=13.0)
        assert standing_vehicle_count(st_)[0] == 0

    def test_all_halted(self):
        st_ = state_with(cross(), {"in_E": [1.0, 8.5], "in_W": [1.0]})
        assert standing_vehicle_count(st_)[0] == 3

    def test_mixed_three_halted_two_moving(self):
        st_ = state_with(cross(), {"in_E": [1.0, 8.5, 16.0]})
        place_vehicle(st_, Vehicle("m1", ("in_N",), 0.0), "in_N", 40.0, speed=5.0)
        place_vehicle(st_, Vehicle("m2", ("in_S",), 0.0), "in_S", 40.0, speed=0.1)
        total, per_lane = standing_vehicle_count(st_)
        assert total == 3 and per_lane["in_E"] == 3 and per_lane["in_N"] == 0
