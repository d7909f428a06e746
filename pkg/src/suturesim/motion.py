"""Motion-state classification from NIR frames (flow-threshold and CNN
detectors), transition-accuracy scoring, and the breathing-sync trigger."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .tissue import BreathState, NirFrame


class WindowTooShort(RuntimeError):
    pass


class MissingGroundTruth(ValueError):
    pass


class NonPositiveVelocity(ValueError):
    pass


class NonPositivePeriod(ValueError):
    pass


# -- trigger -------------------------------------------------------------------


@dataclass(frozen=True)
class SyncTrigger:
    t: float
    d: float
    v: float
    period: float
    n: int
    t_t: float


def trigger_time(t: float, d: float, v: float, period: float) -> SyncTrigger:
    """Dispatch time t_t = n*period - d/v with the smallest integer n making
    t_t strictly greater than the current time t."""
    if v <= 0:
        raise NonPositiveVelocity(f"average velocity must be positive, got {v}")
    if period <= 0:
        raise NonPositivePeriod(f"breathing period must be positive, got {period}")
    if d < 0:
        raise ValueError(f"distance must be non-negative, got {d}")
    travel = d / v
    n = math.floor((t + travel) / period) + 1
    # Guard against floating-point landing exactly on or below t.
    while n * period - travel <= t:
        n += 1
    return SyncTrigger(t=t, d=d, v=v, period=period, n=n, t_t=n * period - travel)


# -- encoding ------------------------------------------------------------------


@dataclass(frozen=True)
class MotionEncoding:
    """Two-channel down-sampled compositing of the trailing frame window.

    ``history`` is a recency-weighted per-pixel max of the window (newest
    frame brightest, so the current marker position is the brightest spot of
    its trail). ``direction`` is |newest - oldest|. Both live in [0, 1].
    """

    history: np.ndarray
    direction: np.ndarray
    window_s: float

    def stacked(self) -> np.ndarray:
        return np.stack([self.history, self.direction]).astype(np.float32)


def _downsample_indices(src_h: int, src_w: int, grid: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.minimum((np.arange(grid) + 0.5) * src_h / grid, src_h - 1).astype(int)
    cols = np.minimum((np.arange(grid) + 0.5) * src_w / grid, src_w - 1).astype(int)
    return rows, cols


def downsample(pixels: np.ndarray, grid: int = 128) -> np.ndarray:
    rows, cols = _downsample_indices(pixels.shape[0], pixels.shape[1], grid)
    return pixels[np.ix_(rows, cols)]


HISTORY_WEIGHT_FLOOR = 0.35


def encode(
    frames: Sequence[NirFrame],
    window_s: float = 2.0,
    grid: int = 128,
) -> MotionEncoding:
    """Composite a trailing window of frames into a MotionEncoding."""
    if len(frames) < 2:
        raise WindowTooShort("need at least two frames")
    span = frames[-1].timestamp - frames[0].timestamp
    if span + 1e-9 < window_s:
        raise WindowTooShort(
            f"window spans {span:.3f}s, needs at least {window_s:.3f}s"
        )
    small = [downsample(f.pixels, grid) for f in frames]
    n = len(small)
    weights = HISTORY_WEIGHT_FLOOR + (1.0 - HISTORY_WEIGHT_FLOOR) * np.arange(n) / (n - 1)
    history = small[0] * weights[0]
    for w, img in zip(weights[1:], small[1:]):
        np.maximum(history, img * w, out=history)
    direction = np.abs(small[-1] - small[0])
    return MotionEncoding(
        history=np.clip(history, 0.0, 1.0),
        direction=np.clip(direction, 0.0, 1.0),
        window_s=window_s,
    )


# -- flow detectors (OF fixed / OA adjustable) -----------------------------------


def flow_energy(prev: np.ndarray, curr: np.ndarray, blur: int = 5) -> float:
    """RMS of the box-blurred signed inter-frame difference.

    The spatial blur is the low-pass stage: zero-mean pixel noise cancels
    inside the box while the spatially coherent blob motion survives.
    """
    diff = curr.astype(np.float64) - prev.astype(np.float64)
    if blur > 1:
        k = blur
        cs = np.cumsum(np.cumsum(diff, axis=0), axis=1)
        cs = np.pad(cs, ((1, 0), (1, 0)))
        h, w = diff.shape
        r0 = np.clip(np.arange(h) - k // 2, 0, h)
        r1 = np.clip(np.arange(h) + k // 2 + 1, 0, h)
        c0 = np.clip(np.arange(w) - k // 2, 0, w)
        c1 = np.clip(np.arange(w) + k // 2 + 1, 0, w)
        area = (r1 - r0)[:, None] * (c1 - c0)[None, :]
        diff = (cs[np.ix_(r1, c1)] - cs[np.ix_(r0, c1)] - cs[np.ix_(r1, c0)] + cs[np.ix_(r0, c0)]) / area
    return float(np.sqrt(np.mean(diff**2)))


@dataclass
class ThresholdTable:
    """Distance-indexed flow thresholds for the adjustable (OA) variant.

    Between entries the threshold is interpolated log-log; outside the table
    (including the single-entry case) it is extrapolated with an
    inverse-square distance law, the scaling a received-intensity model
    predicts. The RMS flow statistic actually falls off more slowly and the
    sensor noise floor not at all, which is exactly what makes the
    single-entry table fragile across distances.
    """

    entries: dict[float, float]
    extrapolation_exponent: float = 2.0

    def threshold_for(self, distance_mm: float) -> float:
        if not self.entries:
            raise ValueError("threshold table is empty")
        ds = sorted(self.entries)
        if distance_mm in self.entries:
            return self.entries[distance_mm]
        if len(ds) == 1 or distance_mm < ds[0] or distance_mm > ds[-1]:
            ref = min(ds, key=lambda d: abs(math.log(distance_mm / d)))
            return self.entries[ref] * (ref / distance_mm) ** self.extrapolation_exponent
        hi = next(d for d in ds if d > distance_mm)
        lo = ds[ds.index(hi) - 1]
        f = (math.log(distance_mm) - math.log(lo)) / (math.log(hi) - math.log(lo))
        return math.exp(
            (1 - f) * math.log(self.entries[lo]) + f * math.log(self.entries[hi])
        )


class FlowDetector:
    """Inter-frame difference energy, EMA low-passed, against a threshold.

    ``threshold`` fixes the OF variant; ``table`` plus ``distance_mm`` selects
    the OA variant's adjustable threshold.
    """

    def __init__(
        self,
        threshold: float | None = None,
        table: ThresholdTable | None = None,
        distance_mm: float | None = None,
        alpha: float = 0.2,
        blur: int = 5,
    ):
        if (threshold is None) == (table is None):
            raise ValueError("provide exactly one of threshold or table")
        if table is not None:
            if distance_mm is None:
                raise ValueError("adjustable mode needs the working distance")
            threshold = table.threshold_for(distance_mm)
        self.threshold = float(threshold)
        self.alpha = alpha
        self.blur = blur
        self.reset()

    def reset(self) -> None:
        self._prev: np.ndarray | None = None
        self._ema: float | None = None

    def update(self, frame: NirFrame) -> BreathState:
        if self._prev is None:
            self._prev = frame.pixels
            return BreathState.STATIONARY
        energy = flow_energy(self._prev, frame.pixels, blur=self.blur)
        self._prev = frame.pixels
        if self._ema is None:
            self._ema = energy
        else:
            self._ema = self.alpha * energy + (1 - self.alpha) * self._ema
        return BreathState.MOVING if self._ema > self.threshold else BreathState.STATIONARY


def classify_of(
    frames: Sequence[NirFrame],
    threshold: float | None = None,
    table: ThresholdTable | None = None,
    distance_mm: float | None = None,
    alpha: float = 0.2,
) -> BreathState:
    """Run a flow detector over the frames and return the final state."""
    if len(frames) < 2:
        raise WindowTooShort("need at least two frames")
    det = FlowDetector(threshold=threshold, table=table, distance_mm=distance_mm, alpha=alpha)
    state = BreathState.STATIONARY
    for f in frames:
        state = det.update(f)
    return state


# -- CNN detector ------------------------------------------------------------------

MOVING_INDEX = 0
STATIONARY_INDEX = 1


def motion_net_spec(grid: int = 128) -> list[dict]:
    """4 convolutional and 3 dense layers with a two-way softmax head.

    The encoding is max-pooled to 32x32 before the first convolution: the
    bright-trail features survive max pooling, and the conv stack then runs
    at a resolution plain SGD trains quickly.
    """
    spec: list[dict] = []
    while grid > 32:
        spec.append({"type": "pool"})
        grid //= 2
    spec += [
        {"type": "conv", "out_channels": 8, "kernel": 3, "padding": "same"},
        {"type": "leaky_relu"},
        {"type": "pool"},
        {"type": "conv", "out_channels": 16, "kernel": 3, "padding": "same"},
        {"type": "leaky_relu"},
        {"type": "pool"},
        {"type": "conv", "out_channels": 16, "kernel": 3, "padding": "same"},
        {"type": "leaky_relu"},
        {"type": "pool"},
        {"type": "conv", "out_channels": 16, "kernel": 3, "padding": "same"},
        {"type": "leaky_relu"},
        {"type": "flatten"},
        {"type": "dense", "width": 64},
        {"type": "leaky_relu"},
        {"type": "dense", "width": 16},
        {"type": "leaky_relu"},
        {"type": "dense", "width": 2},
    ]
    return spec


def build_motion_net(grid: int = 128, seed: int = 0, dtype=np.float32) -> nn.Network:
    return nn.build_network(motion_net_spec(grid), input_shape=(2, grid, grid), seed=seed, dtype=dtype)


def classify_cnn(net: nn.Network, enc: MotionEncoding) -> tuple[BreathState, float]:
    """Softmax over {Moving, Stationary}; exact ties break to Moving, the safe
    state (a delayed capture is recoverable, a blurred one is not)."""
    logits = net.forward(enc.stacked().astype(net.dtype))
    probs = nn.softmax(logits[None, :])[0]
    if probs[STATIONARY_INDEX] > probs[MOVING_INDEX]:
        return BreathState.STATIONARY, float(probs[STATIONARY_INDEX])
    return BreathState.MOVING, float(probs[MOVING_INDEX])


def classify_cnn_batch(net: nn.Network, encodings: Sequence[MotionEncoding], chunk: int = 64) -> list[BreathState]:
    states: list[BreathState] = []
    for i in range(0, len(encodings), chunk):
        block = np.stack([e.stacked() for e in encodings[i : i + chunk]]).astype(net.dtype)
        logits = net.forward(block)
        probs = nn.softmax(logits)
        for p in probs:
            if p[STATIONARY_INDEX] > p[MOVING_INDEX]:
                states.append(BreathState.STATIONARY)
            else:
                states.append(BreathState.MOVING)
    return states


# -- transition scoring ----------------------------------------------------------


@dataclass(frozen=True)
class LabeledRecording:
    """Frames plus ground truth for transition-accuracy evaluation."""

    frames: tuple[NirFrame, ...]
    truth_transitions: tuple[tuple[float, str], ...]
    cycle_bounds: tuple[tuple[float, float], ...]
    distance_mm: float
    orientation_deg: float = 0.0

    def times(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])


def detect_transitions(
    times: Sequence[float], states: Sequence[BreathState], min_hold: int = 2
) -> list[tuple[float, str]]:
    """State-flip times, debounced: a flip counts only if the new state holds
    for at least ``min_hold`` consecutive frames."""
    out: list[tuple[float, str]] = []
    if not states:
        return out
    current = states[0]
    i = 1
    n = len(states)
    while i < n:
        if states[i] != current:
            run = 1
            while i + run < n and states[i + run] == states[i]:
                run += 1
            if run >= min_hold:
                kind = "start" if states[i] is BreathState.MOVING else "stop"
                out.append((float(times[i]), kind))
                current = states[i]
            i += run
        else:
            i += 1
    return out


@dataclass(frozen=True)
class CycleResult:
    cycle_index: int
    correct: bool
    matched: int
    expected: int
    spurious: int


@dataclass(frozen=True)
class TransitionReport:
    cycles: tuple[CycleResult, ...]

    @property
    def accuracy(self) -> float:
        if not self.cycles:
            return 0.0
        return sum(c.correct for c in self.cycles) / len(self.cycles)


def evaluate_transitions(
    predicted: Sequence[tuple[float, str]],
    recording: LabeledRecording,
    tolerance_s: float = 0.3,
) -> TransitionReport:
    """Per cycle, both ground-truth transitions must be matched by a predicted
    transition of the same kind within the tolerance window, and no unmatched
    (spurious) prediction may fall inside the cycle; any wrong label counts
    the whole cycle as a mistake."""
    if not recording.truth_transitions:
        raise MissingGroundTruth("recording carries no ground-truth transitions")
    truth = list(recording.truth_transitions)
    pred = sorted(predicted)
    matched_pred: set[int] = set()
    matched_truth: set[int] = set()
    for ti, (t_time, t_kind) in enumerate(truth):
        best = None
        best_dt = tolerance_s
        for pi, (p_time, p_kind) in enumerate(pred):
            if pi in matched_pred or p_kind != t_kind:
                continue
            dt = abs(p_time - t_time)
            if dt <= best_dt:
                best = pi
                best_dt = dt
        if best is not None:
            matched_pred.add(best)
            matched_truth.add(ti)

    results = []
    for ci, (a, b) in enumerate(recording.cycle_bounds):
        expected = [i for i, (t, _) in enumerate(truth) if a <= t < b]
        ok = all(i in matched_truth for i in expected)
        spurious = sum(
            1 for pi, (p, _) in enumerate(pred) if a <= p < b and pi not in matched_pred
        )
        results.append(
            CycleResult(
                cycle_index=ci,
                correct=ok and spurious == 0,
                matched=sum(1 for i in expected if i in matched_truth),
                expected=len(expected),
                spurious=spurious,
            )
        )
    return TransitionReport(cycles=tuple(results))


def run_flow_detector(recording: LabeledRecording, detector: FlowDetector) -> list[BreathState]:
    detector.reset()
    return [detector.update(f) for f in recording.frames]


def encodings_for_recording(
    recording: LabeledRecording, window_s: float = 2.0, grid: int = 128, stride: int = 1
) -> tuple[list[int], list[MotionEncoding]]:
    """Encodings for every ``stride``-th frame whose trailing window is
    complete."""
    frames = recording.frames
    times = recording.times()
    small = [downsample(f.pixels, grid) for f in frames]
    indices: list[int] = []
    encodings: list[MotionEncoding] = []
    for i in range(0, len(frames), stride):
        j = i
        while j > 0 and times[i] - times[j - 1] <= window_s + 1e-9:
            j -= 1
        if times[i] - times[j] + 1e-9 < window_s:
            continue
        window = small[j : i + 1]
        n = len(window)
        weights = HISTORY_WEIGHT_FLOOR + (1.0 - HISTORY_WEIGHT_FLOOR) * np.arange(n) / (n - 1)
        history = window[0] * weights[0]
        for w, img in zip(weights[1:], window[1:]):
            np.maximum(history, img * w, out=history)
        direction = np.abs(window[-1] - window[0])
        indices.append(i)
        encodings.append(
            MotionEncoding(
                history=np.clip(history, 0.0, 1.0),
                direction=np.clip(direction, 0.0, 1.0),
                window_s=window_s,
            )
        )
    return indices, encodings


class OracleDetector:
    """Ground-truth breath state; the reference detector for scripted runs."""

    def __init__(self, tissue_state):
        self._tissue = tissue_state

    def update(self, _frame=None) -> BreathState:
        return self._tissue.breath_state()
