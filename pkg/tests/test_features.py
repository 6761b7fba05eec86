import cmath
import math

import numpy as np
import pytest

from conftest import make_trajectory, parked_trajectory
from coopball.features import (
    FeatureField,
    History,
    feature_fields,
    first_differences,
    pace,
    reaction,
    second_differences,
    sliding_windows,
    spectral_entropy,
    visit_frequency,
    window_entropy,
)
from coopball.grids import GoalGrid


def grid3():
    return GoalGrid(nx=3, ny=3, half_width=0.25, half_height=0.25)


def history_of(*trajs, discount=1.0, window=10):
    h = History(recency_discount=discount, window=window)
    for i, t in enumerate(trajs):
        h = h.with_trajectory(t, i)
    return h


def oracle_entropy(x):
    """Direct DFT-and-sum spectral entropy, bins 1..ceil(n/2)-1."""
    n = len(x)
    powers = []
    for k in range(1, (n + 1) // 2):
        s = sum(x[t] * cmath.exp(-2j * math.pi * k * t / n)
                for t in range(n))
        powers.append(abs(s) ** 2)
    total = sum(powers)
    if total == 0:
        return 0.0
    return -sum(p / total * math.log2(p / total)
                for p in powers if p > 0)


class TestWindowEntropy:
    def test_constant_signal_is_zero(self):
        assert window_entropy(np.full(64, 0.2)) == 0.0

    def test_pure_sinusoid_is_a_single_line(self):
        t = np.arange(64)
        x = np.sin(2 * np.pi * 5 * t / 64)
        assert window_entropy(x) == pytest.approx(0.0, abs=1e-9)

    def test_iid_noise_matches_direct_dft_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=64)
        val = window_entropy(x)
        assert val == pytest.approx(oracle_entropy(list(x)), abs=1e-9)
        # 31 usable lines bound the entropy; noise sits near the top
        assert 3.5 <= val <= math.log2(31) + 1e-9

    def test_odd_length_window_matches_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=33)
        assert window_entropy(x) == pytest.approx(oracle_entropy(list(x)),
                                                  abs=1e-9)

    def test_entropy_bounded_by_line_count(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            x = rng.normal(size=64)
            assert window_entropy(x) <= math.log2(31) + 1e-9

    def test_windowing_covers_signal_with_stride(self):
        assert sliding_windows(64) == [(0, 64)]
        assert sliding_windows(128) == [(0, 64), (32, 96), (64, 128)]
        assert sliding_windows(20) == [(0, 20)]


class TestSpectralEntropyField:
    def test_parked_ball_falls_back_to_uniform(self):
        g = grid3()
        h = history_of(parked_trajectory(0.0, 0.0, 40))
        f = spectral_entropy(h, g)
        assert np.allclose(f.axis_x, 1 / 3)
        assert np.allclose(f.axis_y, 1 / 3)
        assert np.allclose(f.joint, 1 / 9)

    def test_oscillating_region_gains_mass(self):
        g = grid3()
        t = np.arange(80)
        # x oscillates inside the left cell, y parked at center
        x = -1 / 6 + 0.05 * np.sin(2 * np.pi * t / 7) * np.sign(
            np.sin(2 * np.pi * t / 3))
        pts = [(float(xi), 0.0) for xi in x]
        f = spectral_entropy(history_of(make_trajectory(pts)), g)
        assert f.axis_x[0] > f.axis_x[2]
        assert f.axis_x.sum() == pytest.approx(1.0, abs=1e-9)

    def test_too_short_trajectories_are_skipped(self):
        g = grid3()
        h = history_of(parked_trajectory(0.2, 0.2, 4))
        f = spectral_entropy(h, g)
        assert np.allclose(f.axis_x, 1 / 3)


class TestVisitFrequency:
    def test_single_cell_history_is_a_delta(self):
        g = grid3()
        f = visit_frequency(history_of(parked_trajectory(1 / 6, -1 / 6, 30)),
                            g)
        assert f.axis_x[2] == 1.0
        assert f.axis_y[0] == 1.0
        assert f.joint[0 * 3 + 2] == pytest.approx(1.0)

    def test_equal_coverage_is_uniform(self):
        g = grid3()
        pts = [(-1 / 6, 0.0), (0.0, 0.0), (1 / 6, 0.0)] * 5
        f = visit_frequency(history_of(make_trajectory(pts)), g)
        assert np.allclose(f.axis_x, 1 / 3, atol=1e-12)

    def test_three_bin_toy_counting_oracle(self):
        g = grid3()
        pts = [(-1 / 6, 0.0), (-1 / 6, 0.0), (1 / 6, 0.0), (1 / 6, 0.0)]
        f = visit_frequency(history_of(make_trajectory(pts)), g)
        assert np.allclose(f.axis_x, [0.5, 0.0, 0.5], atol=1e-12)

    def test_recency_discount_downweights_old_iterations(self):
        g = grid3()
        old = parked_trajectory(-1 / 6, 0.0, 10)
        new = parked_trajectory(1 / 6, 0.0, 10)
        f = visit_frequency(history_of(old, new, discount=0.5), g)
        # weights: old 0.5, new 1.0 over 10 samples each
        assert f.axis_x[0] == pytest.approx(1 / 3, abs=1e-12)
        assert f.axis_x[2] == pytest.approx(2 / 3, abs=1e-12)

    def test_window_drops_oldest_trajectories(self):
        g = GoalGrid(nx=12, ny=2, half_width=0.25, half_height=0.25)
        cx = g.centers_x
        trajs = [parked_trajectory(cx[i], 0.0, 5) for i in range(12)]
        f = visit_frequency(history_of(*trajs, window=10), g)
        assert f.axis_x[0] == 0.0 and f.axis_x[1] == 0.0
        assert np.all(f.axis_x[2:] > 0)


class TestPace:
    def test_stationary_trajectory_has_zero_differences(self):
        traj = parked_trajectory(0.1, 0.1, 12)
        assert np.all(first_differences(traj, 0) == 0.0)
        assert np.all(first_differences(traj, 1) == 0.0)

    def test_constant_velocity_spikes_at_step_over_tau(self):
        delta, tau = 0.01, 0.05
        pts = [(delta * i - 0.2, 0.0) for i in range(20)]
        traj = make_trajectory(pts, sample_time=tau)
        d = first_differences(traj, 0)
        assert np.allclose(d, delta / tau, atol=1e-12)

    def test_slow_region_outweighs_fast_sweep(self):
        g = grid3()
        sweep = [(-0.2 + 0.1 * i, 0.0) for i in range(5)]
        parked = [(0.2, 0.0)] * 20
        f = pace(history_of(make_trajectory(sweep + parked)), g)
        assert f.axis_x[2] > 0.9

    def test_single_sample_trajectories_are_skipped(self):
        g = grid3()
        f = pace(history_of(parked_trajectory(0.0, 0.0, 1)), g)
        assert np.allclose(f.axis_x, 1 / 3)


class TestReaction:
    def test_linear_ramp_has_zero_second_differences(self):
        pts = [(0.01 * i - 0.1, 0.005 * i - 0.05) for i in range(15)]
        traj = make_trajectory(pts)
        assert np.allclose(second_differences(traj, 0), 0.0, atol=1e-12)
        assert np.allclose(second_differences(traj, 1), 0.0, atol=1e-12)

    def test_quadratic_trajectory_matches_analytic_curvature(self):
        c, tau = 0.002, 0.05
        pts = [(c * i * i - 0.1, 0.0) for i in range(9)]
        traj = make_trajectory(pts, sample_time=tau)
        d = second_differences(traj, 0)
        assert np.allclose(d, 2 * c / tau ** 2, atol=1e-9)

    def test_stationary_matches_pace_degenerate_case(self):
        g = grid3()
        h = history_of(parked_trajectory(-1 / 6, 1 / 6, 10))
        fp, fr = pace(h, g), reaction(h, g)
        assert np.array_equal(fp.axis_x, fr.axis_x)
        assert fp.axis_x[0] == 1.0

    def test_short_trajectories_skipped(self):
        g = grid3()
        f = reaction(history_of(make_trajectory([(0, 0), (0.1, 0)])), g)
        assert np.allclose(f.axis_x, 1 / 3)


class TestJointAndValidity:
    def test_joint_is_outer_product_row_major(self):
        g = grid3()
        f = visit_frequency(history_of(parked_trajectory(1 / 6, 0.0, 5)), g)
        expect = np.outer(f.axis_y, f.axis_x).ravel()
        assert np.allclose(f.joint, expect / expect.sum(), atol=1e-12)
        assert f.joint[1 * 3 + 2] == pytest.approx(1.0)

    def test_field_validation_rejects_bad_distributions(self):
        with pytest.raises(ValueError):
            FeatureField(feature_id="pace", axis_x=np.array([0.7, 0.7, 0.0]),
                         axis_y=np.full(3, 1 / 3), joint=np.full(9, 1 / 9),
                         window=10, bin_count=(3, 3))
        with pytest.raises(ValueError):
            FeatureField(feature_id="bogus", axis_x=np.full(3, 1 / 3),
                         axis_y=np.full(3, 1 / 3), joint=np.full(9, 1 / 9),
                         window=10, bin_count=(3, 3))

    def test_randomized_histories_always_yield_valid_fields(self):
        g = GoalGrid(nx=5, ny=4, half_width=0.25, half_height=0.2)
        rng = np.random.default_rng(12)
        for trial in range(60):
            n_traj = int(rng.integers(1, 4))
            trajs = []
            for _ in range(n_traj):
                kind = rng.integers(0, 4)
                if kind == 0:
                    t = parked_trajectory(rng.uniform(-0.3, 0.3),
                                          rng.uniform(-0.3, 0.3),
                                          int(rng.integers(1, 4)))
                elif kind == 1:
                    steps = int(rng.integers(2, 120))
                    walk = np.cumsum(rng.normal(0, 0.01, size=(steps, 2)),
                                     axis=0)
                    t = make_trajectory([tuple(p) for p in walk])
                elif kind == 2:
                    t = parked_trajectory(5.0, -5.0, 10)  # out of bounds
                else:
                    t = make_trajectory([(0.0, 0.0)] * 64)
                trajs.append(t)
            fields = feature_fields(history_of(*trajs), g)
            assert set(fields) == {"spectral_entropy", "visit_frequency",
                                   "pace", "reaction"}
            for f in fields.values():
                for arr in (f.axis_x, f.axis_y, f.joint):
                    assert np.all(np.isfinite(arr))
                    assert np.all(arr >= 0)
                assert abs(f.axis_x.sum() - 1) <= 1e-9
                assert abs(f.axis_y.sum() - 1) <= 1e-9
                assert abs(f.joint.sum() - 1) <= 1e-6


class TestHistory:
    def test_validation(self):
        with pytest.raises(ValueError):
            History(recency_discount=0.0)
        with pytest.raises(ValueError):
            History(window=0)

    def test_iteration_indices_must_not_decrease(self):
        h = History().with_trajectory(parked_trajectory(0, 0, 3), 5)
        with pytest.raises(ValueError):
            h.with_trajectory(parked_trajectory(0, 0, 3), 4)

    def test_empty_trajectory_rejected(self):
        with pytest.raises(ValueError):
            History().with_trajectory(make_trajectory([]), 0)

    def test_same_iteration_append_order_is_irrelevant(self):
        g = grid3()
        a = parked_trajectory(-1 / 6, 0.0, 9)
        b = make_trajectory([(0.05 * i - 0.1, 0.1) for i in range(12)])
        h1 = History().with_trajectory(a, 0).with_trajectory(b, 0)
        h2 = History().with_trajectory(b, 0).with_trajectory(a, 0)
        f1 = feature_fields(h1, g)
        f2 = feature_fields(h2, g)
        for fid in f1:
            assert np.array_equal(f1[fid].joint, f2[fid].joint)
            assert np.array_equal(f1[fid].axis_x, f2[fid].axis_x)

    def test_serialization_round_trip_is_bit_identical(self):
        g = grid3()
        rng = np.random.default_rng(3)
        walk = np.cumsum(rng.normal(0, 0.02, size=(70, 2)), axis=0)
        h = history_of(make_trajectory([tuple(p) for p in walk]),
                       parked_trajectory(0.1, -0.1, 30))
        back = History.from_json(h.to_json())
        f1 = feature_fields(h, g)
        f2 = feature_fields(back, g)
        for fid in f1:
            assert np.array_equal(f1[fid].joint, f2[fid].joint)

    def test_empty_history_rejected_by_feature_bundle(self):
        with pytest.raises(ValueError):
            feature_fields(History(), grid3())
