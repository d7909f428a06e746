import math

import numpy as np
import pytest

from suturesim import nn
from suturesim.core import MarkerId, Point3
from suturesim.motion import (
    FlowDetector,
    LabeledRecording,
    MissingGroundTruth,
    NonPositivePeriod,
    NonPositiveVelocity,
    OracleDetector,
    ThresholdTable,
    WindowTooShort,
    build_motion_net,
    classify_cnn,
    classify_of,
    detect_transitions,
    encode,
    evaluate_transitions,
    trigger_time,
)
from suturesim.tissue import BreathState, BreathingProfile, NirCamera, NirFrame, TissueState, render_nir


# -- trigger ---------------------------------------------------------------------


def test_trigger_zero_distance_strict_inequality():
    trig = trigger_time(t=0.0, d=0.0, v=10.0, period=4.2857)
    assert trig.n == 1
    assert trig.t_t == pytest.approx(4.2857)


def test_trigger_worked_example():
    # travel = 40/10 = 4 s; 1*T - 4 = 0.286 <= 1 so n = 2, t_t = 2T - 4.
    period = 60.0 / 14.0
    trig = trigger_time(t=1.0, d=40.0, v=10.0, period=period)
    assert trig.n == 2
    assert trig.t_t == pytest.approx(2 * period - 4.0)
    assert trig.t_t == pytest.approx(4.571, abs=2e-3)


def test_trigger_large_velocity_limit():
    period = 3.0
    trig = trigger_time(t=7.0, d=5.0, v=1e9, period=period)
    # t_t converges to the smallest multiple of the period beyond t.
    assert trig.t_t == pytest.approx(9.0, abs=1e-6)


def test_trigger_errors():
    with pytest.raises(NonPositiveVelocity):
        trigger_time(0, 1, 0.0, 1)
    with pytest.raises(NonPositivePeriod):
        trigger_time(0, 1, 1.0, 0.0)
    with pytest.raises(ValueError):
        trigger_time(0, -1, 1.0, 1.0)


def test_trigger_minimality_property_sweep():
    # 10^4 random tuples: exact formula plus minimality of n.
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        t = float(rng.uniform(0, 100))
        d = float(rng.uniform(0, 200))
        v = float(rng.uniform(0.1, 50))
        period = float(rng.uniform(0.5, 10))
        trig = trigger_time(t, d, v, period)
        assert trig.t_t == trig.n * period - d / v
        assert trig.t_t > t
        assert (trig.n - 1) * period - d / v <= t


# -- encoding ---------------------------------------------------------------------


def _frames_static(count=21, dt=0.1):
    cam = NirCamera.facing_tissue(65.0)
    markers = {MarkerId.TOP: Point3(0, 0, 0)}
    return [render_nir(markers, cam, 65.0, timestamp=i * dt) for i in range(count)]


def test_encode_static_scene():
    frames = _frames_static()
    enc = encode(frames, window_s=2.0)
    assert float(enc.direction.max()) < 1e-6
    # History equals the single-frame blob image (newest weight is 1.0).
    from suturesim.motion import downsample

    assert np.allclose(enc.history, downsample(frames[-1].pixels), atol=1e-6)


def test_encode_window_too_short():
    frames = _frames_static(count=10)
    with pytest.raises(WindowTooShort):
        encode(frames, window_s=2.0)


def test_encode_moving_marker_has_streak_and_direction_energy():
    cam = NirCamera.facing_tissue(65.0)
    frames = []
    for i in range(21):
        z = 3.0 * i / 20.0
        frames.append(
            render_nir({MarkerId.TOP: Point3(0, 0, z)}, cam, 65.0, timestamp=i * 0.1)
        )
    enc = encode(frames, window_s=2.0)
    assert float(enc.direction.max()) > 0.5
    # The streak spans more rows than a single blob.
    static_rows = (encode(_frames_static(), window_s=2.0).history.max(axis=1) > 0.2).sum()
    moving_rows = (enc.history.max(axis=1) > 0.2).sum()
    assert moving_rows > static_rows * 1.5
    assert enc.history.min() >= 0.0 and enc.history.max() <= 1.0
    assert enc.direction.min() >= 0.0 and enc.direction.max() <= 1.0


# -- flow detectors ----------------------------------------------------------------


def test_identical_frames_are_stationary():
    frames = _frames_static(count=5)
    same = [NirFrame(frames[0].pixels, timestamp=i * 0.1) for i in range(5)]
    assert classify_of(same, threshold=1e-12) is BreathState.STATIONARY


def test_flow_detector_flags_motion():
    cam = NirCamera.facing_tissue(65.0)
    frames = []
    for i in range(10):
        z = 1.0 * i  # 10 mm/s: well above breathing peak velocity
        frames.append(render_nir({MarkerId.TOP: Point3(0, 0, z)}, cam, 65.0, timestamp=i * 0.1))
    assert classify_of(frames, threshold=1e-4) is BreathState.MOVING


def test_threshold_table_interpolates_and_extrapolates():
    table = ThresholdTable(entries={30.0: 0.04, 100.0: 0.01})
    assert table.threshold_for(30.0) == 0.04
    mid = table.threshold_for(55.0)
    assert 0.01 < mid < 0.04
    single = ThresholdTable(entries={65.0: 0.02})
    # Single-entry tables extrapolate with the inverse-square model.
    assert single.threshold_for(130.0) == pytest.approx(0.02 / 4.0)
    assert single.threshold_for(32.5) == pytest.approx(0.02 * 4.0)


def test_classify_cnn_untrained_ties_to_moving():
    net = build_motion_net(grid=32, seed=0)
    for p in net.parameters():
        p[...] = 0.0
    enc = encode(_frames_static(), window_s=2.0)
    small = type(enc)(
        history=enc.history[::4, ::4].copy(),
        direction=enc.direction[::4, ::4].copy(),
        window_s=2.0,
    )
    state, confidence = classify_cnn(net, small)
    assert state is BreathState.MOVING
    assert confidence == pytest.approx(0.5)


# -- transition evaluation ------------------------------------------------------------


def _synthetic_recording(profile=None, n_cycles=3, fps=10.0):
    profile = profile or BreathingProfile()
    lead = 2.5
    total = lead + n_cycles * profile.period_s
    times = np.arange(0.0, total, 1.0 / fps)
    truth = tuple(profile.transition_times(lead, total))
    bounds = tuple(
        (lead + k * profile.period_s, lead + (k + 1) * profile.period_s)
        for k in range(n_cycles)
    )
    frames = tuple(NirFrame(np.zeros((4, 4), dtype=np.float32), timestamp=t) for t in times)
    states = [profile.state_at(t) for t in times]
    return LabeledRecording(frames, truth, bounds, distance_mm=65.0), times, states


def test_oracle_detector_scores_100_percent():
    rec, times, states = _synthetic_recording()
    pred = detect_transitions(times, states, min_hold=1)
    report = evaluate_transitions(pred, rec)
    assert report.accuracy == 1.0


def test_constant_detector_scores_zero():
    rec, times, _ = _synthetic_recording()
    pred = detect_transitions(times, [BreathState.STATIONARY] * len(times))
    report = evaluate_transitions(pred, rec)
    assert report.accuracy == 0.0


def test_spurious_transitions_fail_the_cycle():
    rec, times, states = _synthetic_recording()
    noisy = list(states)
    # A flicker deep inside the motion phase, far from any true transition.
    profile = BreathingProfile()
    t_flick = 2.5 * profile.period_s  # phase T/2: the middle of a motion bump
    mid = int(np.searchsorted(times, t_flick))
    assert states[mid] is BreathState.MOVING
    noisy[mid] = noisy[mid + 1] = BreathState.STATIONARY
    pred = detect_transitions(times, noisy, min_hold=2)
    report = evaluate_transitions(pred, rec)
    assert report.accuracy < 1.0


def test_missing_ground_truth_raises():
    rec, times, states = _synthetic_recording()
    bad = LabeledRecording(rec.frames, (), rec.cycle_bounds, distance_mm=65.0)
    with pytest.raises(MissingGroundTruth):
        evaluate_transitions([], bad)


def test_evaluation_is_deterministic():
    rec, times, states = _synthetic_recording()
    pred = detect_transitions(times, states)
    a = evaluate_transitions(pred, rec)
    b = evaluate_transitions(pred, rec)
    assert a == b


def test_oracle_detector_reads_tissue_truth():
    state = TissueState()
    det = OracleDetector(state)
    assert det.update() is BreathState.STATIONARY
    state.step(state.breathing.period_s / 2)
    assert det.update() is BreathState.MOVING
