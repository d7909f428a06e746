"""Outcome scoring: suture spacing, bite depth, coefficient of variation,
hesitancy, session time breakdown, and Mann-Whitney U comparisons."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from typing import Sequence

import numpy as np

from .core import Point3, Wall
from .planner import polyline_min_distance
from .runlog import IncompleteLog, RunLog
from .supervisor import hesitancy_report


class TooFewStitches(ValueError):
    pass


class EdgeUnavailable(ValueError):
    pass


class EmptySample(ValueError):
    pass


def spacing(points: Sequence[Point3]) -> list[float]:
    """Consecutive 3-D distances between achieved stitch positions, ordered
    along the suture line."""
    if len(points) < 2:
        raise TooFewStitches("spacing needs at least two stitches")
    return [
        math.dist((a.x, a.y, a.z), (b.x, b.y, b.z))
        for a, b in zip(points, points[1:])
    ]


def bite_depth(points: Sequence[Point3], edge_polyline: np.ndarray) -> list[float]:
    """Per stitch, the shortest distance to the tissue edge polyline."""
    edge = np.asarray(edge_polyline, dtype=float)
    if edge.ndim != 2 or edge.shape[0] < 2 or edge.shape[1] != 3:
        raise EdgeUnavailable("edge polyline must be an (N>=2, 3) array")
    return [polyline_min_distance(p.as_array(), edge) for p in points]


def cov_percent(samples: Sequence[float]) -> float:
    """Coefficient of variation: 100 * sd / mean (sample sd, ddof=1)."""
    arr = np.asarray(samples, dtype=float)
    if arr.size < 2:
        raise ValueError("COV needs at least two samples")
    mean = float(arr.mean())
    if mean <= 0:
        raise ValueError("COV requires a positive mean")
    return 100.0 * float(arr.std(ddof=1)) / mean


# -- Mann-Whitney U ---------------------------------------------------------------


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_two_sided: float
    method: str  # "exact" or "normal"


def _ranks_with_ties(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


EXACT_ENUMERATION_LIMIT = 64  # n*m at or below this uses the exact distribution


def mann_whitney_u(sample_a: Sequence[float], sample_b: Sequence[float]) -> MannWhitneyResult:
    """U by rank summation; two-sided p by exact enumeration for small
    samples (n*m <= 64) and by the tie-corrected normal approximation
    otherwise."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be non-empty")
    n, m = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _ranks_with_ties(pooled)
    r1 = float(ranks[:n].sum())
    u1 = r1 - n * (n + 1) / 2.0

    if n * m <= EXACT_ENUMERATION_LIMIT:
        idx = range(n + m)
        total = 0
        at_most = 0
        at_least = 0
        base = n * (n + 1) / 2.0
        for combo in combinations(idx, n):
            u = float(ranks[list(combo)].sum()) - base
            total += 1
            if u <= u1 + 1e-12:
                at_most += 1
            if u >= u1 - 1e-12:
                at_least += 1
        p = min(1.0, 2.0 * min(at_most / total, at_least / total))
        return MannWhitneyResult(u=u1, p_two_sided=p, method="exact")

    big_n = n + m
    mu = n * m / 2.0
    # Tie correction on the variance.
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts))
    var = n * m / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if var <= 0:
        return MannWhitneyResult(u=u1, p_two_sided=1.0, method="normal")
    z = (u1 - mu - math.copysign(0.5, u1 - mu)) / math.sqrt(var) if u1 != mu else 0.0
    p = min(1.0, 2.0 * 0.5 * math.erfc(abs(z) / math.sqrt(2.0)))
    return MannWhitneyResult(u=u1, p_two_sided=p, method="normal")


# -- time breakdown ---------------------------------------------------------------

_STATE_BUCKET = {
    "idle": "planning",
    "await_stationary": "planning",
    "capturing": "planning",
    "planning": "planning",
    "baseline_snapshot": "planning",
    "deformation_check": "planning",
    "wall_complete": "planning",
    "await_plan_selection": "supervision",
    "await_replan_approval": "supervision",
    "await_offset_or_repeat": "supervision",
    "await_fire_approval": "supervision",
    "paused": "supervision",
    "await_dispatch": "suturing",
    "executing": "suturing",
    "await_assistant": "suturing",
    "done": None,
    "aborted": None,
}


def time_breakdown(log: RunLog) -> dict[str, float]:
    """Minutes per category: planning, supervision, suturing, and camera
    mode transitions (carved out of their containing states). The categories
    sum to the session duration."""
    end = log.end_data
    if end is None:
        raise IncompleteLog("log has no end record")
    t_end = log.records[-1]["t"]
    states = log.of_kind("state")
    intervals: list[tuple[float, float, str]] = []
    current = "idle"
    t_prev = 0.0
    for rec in states:
        intervals.append((t_prev, rec["t"], current))
        current = rec["data"]["to"]
        t_prev = rec["t"]
    intervals.append((t_prev, t_end, current))

    seconds = {"planning": 0.0, "supervision": 0.0, "suturing": 0.0, "mode_transitions": 0.0}
    for a, b, state in intervals:
        bucket = _STATE_BUCKET.get(state)
        if bucket is not None:
            seconds[bucket] += b - a

    for rec in log.of_kind("activity"):
        if rec["data"].get("name") != "camera_transition":
            continue
        a0 = rec["t"]
        b0 = a0 + rec["data"]["duration"]
        for a, b, state in intervals:
            overlap = max(0.0, min(b, b0) - max(a, a0))
            if overlap > 0:
                bucket = _STATE_BUCKET.get(state)
                if bucket is not None:
                    seconds[bucket] -= overlap
                seconds["mode_transitions"] += overlap
    return {k: v / 60.0 for k, v in seconds.items()}


# -- report -----------------------------------------------------------------------


@dataclass
class MetricsReport:
    stitches: int
    spacing_samples_mm: list[float]
    bite_depth_samples_mm: list[float]
    spacing_mean_mm: float | None
    spacing_sd_mm: float | None
    spacing_cov_pct: float | None
    bite_depth_mean_mm: float | None
    bite_depth_sd_mm: float | None
    bite_depth_cov_pct: float | None
    hesitancy_per_stitch: float
    first_attempt_rate: float
    replans: int
    deformation_events_detected: int
    plateau_arrival_rate: float | None
    time_minutes: dict[str, float]
    total_minutes: float
    status: str
    reference: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stitches": self.stitches,
            "spacing_mm": {
                "samples": [round(s, 6) for s in self.spacing_samples_mm],
                "mean": self.spacing_mean_mm,
                "sd": self.spacing_sd_mm,
                "cov_pct": self.spacing_cov_pct,
            },
            "bite_depth_mm": {
                "samples": [round(s, 6) for s in self.bite_depth_samples_mm],
                "mean": self.bite_depth_mean_mm,
                "sd": self.bite_depth_sd_mm,
                "cov_pct": self.bite_depth_cov_pct,
            },
            "hesitancy_per_stitch": self.hesitancy_per_stitch,
            "first_attempt_rate": self.first_attempt_rate,
            "replans": self.replans,
            "deformation_events_detected": self.deformation_events_detected,
            "plateau_arrival_rate": self.plateau_arrival_rate,
            "time_minutes": {k: round(v, 6) for k, v in self.time_minutes.items()},
            "total_minutes": round(self.total_minutes, 6),
            "status": self.status,
            "published_reference": self.reference,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_reference_values() -> dict:
    with resources.files("suturesim.data").joinpath("reference_values.json").open() as fh:
        return json.load(fh)


def build_report(log: RunLog, include_reference: bool = True) -> MetricsReport:
    """Score a completed run log.

    Spacing and bite depth use the achieved positions mapped into the tissue
    material frame (the simulation analogue of measuring the finished
    anastomosis), grouped per wall and ordered along the suture line.
    """
    end = log.end_data
    if end is None:
        raise IncompleteLog("log has no end record")
    header = log.header_data
    edges = header["scenario"].get("edge_material", {})

    per_wall: dict[str, dict[int, Point3]] = {w.value: {} for w in Wall}
    plateau_flags: list[bool] = []
    for rec in log.stitches():
        d = rec["data"]
        if not d["success"] or d["achieved_material"] is None:
            continue
        per_wall[d["wall"]][d["wall_index"]] = Point3(*d["achieved_material"])
        plateau_flags.append(bool(d["arrived_in_plateau"]))

    spacing_samples: list[float] = []
    depth_samples: list[float] = []
    n_stitches = 0
    for wall in (Wall.BACK, Wall.FRONT):
        ordered = [per_wall[wall.value][i] for i in sorted(per_wall[wall.value])]
        n_stitches += len(ordered)
        if len(ordered) >= 2:
            spacing_samples.extend(spacing(ordered))
        if ordered and wall.value in edges:
            depth_samples.extend(bite_depth(ordered, np.asarray(edges[wall.value])))

    hes = hesitancy_report(log)
    deform_events = sum(
        1 for r in log.events() if r["data"]["event"] == "deformation_detected"
    )
    replans = sum(
        1
        for r in log.commands()
        if r["data"].get("kind") == "approve_replan"
    )

    def stats(samples):
        if len(samples) < 2:
            return None, None, None
        arr = np.asarray(samples)
        return float(arr.mean()), float(arr.std(ddof=1)), cov_percent(samples)

    sp_mean, sp_sd, sp_cov = stats(spacing_samples)
    bd_mean, bd_sd, bd_cov = stats(depth_samples)
    times = time_breakdown(log)
    return MetricsReport(
        stitches=n_stitches,
        spacing_samples_mm=spacing_samples,
        bite_depth_samples_mm=depth_samples,
        spacing_mean_mm=sp_mean,
        spacing_sd_mm=sp_sd,
        spacing_cov_pct=sp_cov,
        bite_depth_mean_mm=bd_mean,
        bite_depth_sd_mm=bd_sd,
        bite_depth_cov_pct=bd_cov,
        hesitancy_per_stitch=hes.per_stitch,
        first_attempt_rate=hes.first_attempt_rate,
        replans=replans,
        deformation_events_detected=deform_events,
        plateau_arrival_rate=(
            sum(plateau_flags) / len(plateau_flags) if plateau_flags else None
        ),
        time_minutes=times,
        total_minutes=log.records[-1]["t"] / 60.0,
        status=end["status"],
        reference=load_reference_values() if include_reference else {},
    )


def samples_csv(report: MetricsReport) -> str:
    lines = ["metric,index,value_mm"]
    for i, v in enumerate(report.spacing_samples_mm):
        lines.append(f"spacing,{i},{v:.6f}")
    for i, v in enumerate(report.bite_depth_samples_mm):
        lines.append(f"bite_depth,{i},{v:.6f}")
    return "\n".join(lines) + "\n"
