from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import corridor, cross, state_with
from tsclab.encoding import (EncodingError, Features, GraphBuilder, build_state_graph, lane_densities,
                             n_segments, partition, positional_encoding, segment_density, segment_index,
                             transition_prior)
from tsclab.microsim import HEADWAY, Vehicle, apply_action, new_state, place_vehicle, step
from tsclab.network import Lane


def _lane(length):
    return Lane("l", length, None, None)


class TestPartition:
    def test_exact_division(self):
        assert len(partition(_lane(100), 10)) == 10

    def test_remainder_dropped_at_far_end(self):
        segs = partition(_lane(95), 10)
        assert len(segs) == 9 and segs[0] == (0, 10) and segs[-1] == (80, 90)

    def test_single_segment(self):
        assert partition(_lane(10), 10) == [(0, 10)]

    @pytest.mark.parametrize("ds", [5.0, 120.0])
    def test_bounds(self, ds):
        with pytest.raises(EncodingError):
            partition(_lane(100), ds)


class TestDensity:
    def test_empty_segment(self):
        assert segment_density(new_state(cross()), "in_N", 3) == 0.0

    def test_two_vehicles_in_segment(self):
        st_ = state_with(cross(), {"in_N": [11.0, 19.0]})
        assert segment_density(st_, "in_N", 1) == pytest.approx(0.2)

    def test_boundary_belongs_to_nearer_segment(self):
        assert segment_index(10.0, 10.0) == 0
        assert segment_index(10.0 + 1e-6, 10.0) == 1
        assert segment_index(0.5, 10.0) == 0
        st_ = state_with(cross(), {"in_N": [20.0]})
        assert lane_densities(st_, "in_N")[[1, 2]].tolist() == [0.1, 0.0]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 100.0), max_size=15), st.sampled_from([7.5, 10.0, 12.5, 20.0]))
    def test_counts_conserved_on_partitioned_prefix(self, positions, ds):
        net = cross(length_in=97.0)
        st_ = state_with(net, {"in_N": [min(p, 97.0) for p in positions]})
        rho = lane_densities(st_, "in_N", ds)
        covered = n_segments(97.0, ds) * ds
        on_prefix = sum(1 for v in st_.lanes["in_N"] if v.pos_m <= covered + 1e-9)
        assert rho.sum() * ds == pytest.approx(on_prefix, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(1.0, 100.0), max_size=14), st.sampled_from([7.5, 10.0, 15.0, 25.0]))
    def test_density_bound_under_headway(self, raw, ds):
        positions, last = [], -math.inf
        for p in sorted(raw):
            if p - last >= HEADWAY:
                positions.append(p)
                last = p
        st_ = state_with(cross(), {"in_N": positions})
        assert lane_densities(st_, "in_N", ds).max(initial=0.0) <= math.ceil(ds / HEADWAY) / ds + 1e-12

    def test_crossing_a_boundary_changes_two_densities(self):
        a = lane_densities(state_with(cross(), {"in_N": [35.0, 55.0]}), "in_N")
        b = lane_densities(state_with(cross(), {"in_N": [35.0, 65.0]}), "in_N")
        assert np.flatnonzero(a != b).tolist() == [5, 6]


class TestTransitionPrior:
    def test_no_neighbouring_traffic_gives_zero(self):
        st_ = state_with(corridor(2), {"e0": [5.0, 30.0]})
        assert transition_prior(st_, "e0") == 0.0

    def test_hand_evaluation(self):
        # synthetic state: densities are a pure function of positions, so headway is not needed here
        st_ = new_state(corridor(2))
        for k, pos in enumerate([2.0, 5.0, 8.0]):
            place_vehicle(st_, Vehicle(f"u{k}", ("e0", "e1"), 0.0), "e0", pos)
        place_vehicle(st_, Vehicle("d", ("e2",), 0.0), "e2", 5.0)
        assert segment_density(st_, "e0", 0) == pytest.approx(0.3)
        assert transition_prior(st_, "e1") == pytest.approx(0.3 - 0.1)

    def test_symmetric_cancels(self):
        st_ = state_with(corridor(2), {"e0": [4.0], "e2": [6.0]})
        assert transition_prior(st_, "e1") == 0.0


class TestPositionalEncoding:
    def test_index_zero(self):
        pe = positional_encoding(0, 0, 16)
        assert pe.tolist() == [0.0, 1.0] * 8

    def test_deterministic(self):
        assert np.array_equal(positional_encoding(3, 2), positional_encoding(3, 2))

    def test_neighbouring_indices_differ_in_every_band(self):
        a, b = positional_encoding(1, 0, 16)[:8], positional_encoding(2, 0, 16)[:8]
        bands = (a != b).reshape(4, 2).any(axis=1)
        assert bands.all()

    def test_halves_are_independent(self):
        pe = positional_encoding(4, 1, 16)
        assert np.array_equal(pe[:8], positional_encoding(4, 0, 16)[:8])
        assert np.array_equal(pe[8:], positional_encoding(0, 1, 16)[8:])

    def test_odd_width_rejected(self):
        with pytest.raises(EncodingError):
            positional_encoding(0, 0, 7)
        with pytest.raises(EncodingError):
            GraphBuilder(cross(), d_pe=7)


class TestStateGraph:
    def test_empty_traffic(self):
        g = build_state_graph(new_state(cross()), "C")
        assert g.n_segments == 8 * 10 and g.n_movements == 12 and g.n_phases == 2
        assert g.seg_feat.shape == (80, 18)
        assert np.all(g.seg_feat[:, 0] == 0) and np.all(g.seg_feat[:, -1] == 0)

    def test_sizes_follow_lane_lengths(self):
        g = build_state_graph(new_state(cross(length_in=95.0, length_out=42.0)), "C")
        assert g.n_segments == 4 * 9 + 4 * 4

    def test_active_phase_flag_is_one_hot(self):
        st_ = new_state(cross())
        assert build_state_graph(st_, "C").phase_flag.tolist() == [1.0, 0.0]
        apply_action(st_.controllers["C"], "C:EW", 0.0)
        for _ in range(5):
            step(st_)
        assert build_state_graph(st_, "C").phase_flag.tolist() == [0.0, 1.0]

    def test_known_placement(self):
        st_ = state_with(cross(), {"in_E": [3.0, 12.0, 19.5], "out_S": [99.0]})
        g = build_state_graph(st_, "C")
        lanes = g.lane_ids
        dens = {lid: g.seg_feat[g.seg_lane == j, 0] for j, lid in enumerate(lanes)}
        assert dens["in_E"][:3].tolist() == [0.1, 0.2, 0.0]
        assert dens["out_S"][9] == 0.1
        assert sum(float(d.sum()) for d in dens.values()) == pytest.approx(0.4)

    def test_edge_features(self):
        net = cross()
        g = build_state_graph(new_state(net), "C")
        for i, mid in enumerate(g.move_ids):
            for j, pid in enumerate(g.phase_ids):
                phase = next(p for p in net.phases_of("C") if p.id == pid)
                assert g.gamma[i, j] == int(phase.signal[mid])
        assert np.array_equal(g.jacc, g.jacc.T) and np.all(np.diag(g.jacc) == 1.0)
        assert g.jacc[0, 1] == 0.0

    def test_prior_feature_broadcast_per_lane(self):
        net = corridor(2)
        st_ = state_with(net, {"e0": [4.0]})
        g = build_state_graph(st_, "V1")
        j = g.lane_ids.index("e1")
        assert np.all(g.seg_feat[g.seg_lane == j, -1] == pytest.approx(0.1))

    def test_pure_function(self):
        st_ = state_with(cross(), {"in_W": [4.0, 50.0]})
        assert build_state_graph(st_, "C").dump() == build_state_graph(st_, "C").dump()

    @pytest.mark.parametrize("flag", ["pe", "gamma", "jaccard", "prior"])
    def test_ablation_flags_independent(self, flag):
        st_ = state_with(corridor(2), {"e0": [4.0], "e1": [15.0]})
        full = build_state_graph(st_, "V1")
        off = build_state_graph(st_, "V1", features=Features.ablate([flag]))
        parts = {
            "pe": (full.seg_feat[:, 1:-1], off.seg_feat[:, 1:-1]),
            "gamma": (full.gamma, off.gamma),
            "jaccard": (full.jacc, off.jacc),
            "prior": (full.seg_feat[:, -1], off.seg_feat[:, -1]),
        }
        for name, (a, b) in parts.items():
            if name == flag:
                assert np.any(a != 0) and np.all(b == 0)
            else:
                assert np.array_equal(a, b)
        assert np.array_equal(full.seg_feat[:, 0], off.seg_feat[:, 0])
        assert (full.n_segments, full.n_movements, full.n_phases) == (off.n_segments, off.n_movements, off.n_phases)

    def test_unknown_ablation_rejected(self):
        with pytest.raises(ValueError):
            Features.ablate(["pe", "colour"])
