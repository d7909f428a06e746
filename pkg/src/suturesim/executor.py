"""Simulated robot execution: camera modes, RCM-constrained kinematics,
trapezoidal trajectories under conservative velocity limits, and the
per-stitch motion primitives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import GeometryError, Point3, Pose, Wall, unit
from .planner import SuturePoint, tool_frame_axes
from .tissue import TissueState


class InsertionTooDeep(GeometryError):
    pass


class PivotLimitExceeded(GeometryError):
    pass


class StitchInFlight(RuntimeError):
    pass


class BiteMissedTissue(RuntimeError):
    pass


class CameraMode(str, Enum):
    IMAGING = "imaging"
    SUTURE = "suture"


class MotionPrimitive(str, Enum):
    APPROACH = "approach"
    BITE = "bite"
    WAIT_FOR_ASSISTANT = "wait_for_assistant"
    TENSION = "tension"
    RETRACT = "retract"


PRIMITIVE_ORDER = (
    MotionPrimitive.APPROACH,
    MotionPrimitive.BITE,
    MotionPrimitive.WAIT_FOR_ASSISTANT,
    MotionPrimitive.TENSION,
    MotionPrimitive.RETRACT,
)


@dataclass(frozen=True)
class RcmPort:
    """Fixed trocar location the tool shaft must always pass through.

    The default port faces the tissue nearly head-on so the shaft does not
    sweep the opposite wall when reaching across the seam.
    """

    port_point: Point3 = Point3(0.0, -90.0, 10.0)
    axis: tuple[float, float, float] = (0.0, 90.0, -10.0)
    max_insertion_mm: float = 160.0
    max_pivot_rad: float = math.radians(75.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "axis", unit(self.axis))


def solve_rcm(tip_target: Point3, port: RcmPort) -> Pose:
    """Pose the tool tip at the target with the shaft through the port point.

    The shaft direction is the normalized port-to-target vector; insertion
    depth is the port-to-target distance. Raises when the target is deeper
    than the tool allows or outside the pivot cone (the reachability failures
    a real port placement can cause).
    """
    rel = tip_target.as_array() - port.port_point.as_array()
    depth = float(np.linalg.norm(rel))
    if depth < 1e-9:
        raise GeometryError("tip target coincides with the port point")
    if depth > port.max_insertion_mm:
        raise InsertionTooDeep(f"insertion {depth:.1f} mm > {port.max_insertion_mm} mm")
    direction = rel / depth
    axis = np.asarray(port.axis)
    cosang = float(np.clip(np.dot(direction, axis), -1.0, 1.0))
    angle = math.acos(cosang)
    if angle > port.max_pivot_rad:
        raise PivotLimitExceeded(
            f"pivot {math.degrees(angle):.1f} deg > {math.degrees(port.max_pivot_rad):.1f} deg"
        )
    return Pose(position=tip_target, direction=(float(direction[0]), float(direction[1]), float(direction[2])))


def shaft_port_distance(pose: Pose, port: RcmPort) -> float:
    """Distance from the shaft line to the port point (0 when RCM holds)."""
    d = pose.direction_array()
    rel = port.port_point.as_array() - pose.position.as_array()
    return float(np.linalg.norm(rel - np.dot(rel, d) * d))


# -- trajectories -----------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryLimits:
    v_max: float
    a_max: float

    def __post_init__(self) -> None:
        if self.v_max <= 0 or self.a_max <= 0:
            raise ValueError("velocity and acceleration limits must be positive")


@dataclass(frozen=True)
class TrajectoryProfile:
    """Straight-line trapezoidal (or triangular) velocity profile."""

    start: Point3
    end: Point3
    v_max: float
    a_max: float
    distance: float
    duration: float
    cruise: bool

    def position_at(self, t: float) -> Point3:
        if self.distance == 0.0 or t >= self.duration:
            return self.end
        if t <= 0.0:
            return self.start
        a, v = self.a_max, self.v_max
        if self.cruise:
            t_ramp = v / a
            d_ramp = 0.5 * v * t_ramp
            if t < t_ramp:
                s = 0.5 * a * t * t
            elif t < self.duration - t_ramp:
                s = d_ramp + v * (t - t_ramp)
            else:
                td = self.duration - t
                s = self.distance - 0.5 * a * td * td
        else:
            half = self.duration / 2.0
            if t < half:
                s = 0.5 * a * t * t
            else:
                td = self.duration - t
                s = self.distance - 0.5 * a * td * td
        frac = s / self.distance
        p = self.start.as_array() + frac * (self.end.as_array() - self.start.as_array())
        return Point3.from_array(p)

    def speed_at(self, t: float) -> float:
        if self.distance == 0.0 or t <= 0.0 or t >= self.duration:
            return 0.0
        a, v = self.a_max, self.v_max
        if self.cruise:
            t_ramp = v / a
            if t < t_ramp:
                return a * t
            if t < self.duration - t_ramp:
                return v
            return a * (self.duration - t)
        half = self.duration / 2.0
        return a * t if t < half else a * (self.duration - t)


def plan_trajectory(start: Point3, end: Point3, limits: TrajectoryLimits) -> TrajectoryProfile:
    """Trapezoid when the cruise speed is reached (duration d/v + v/a),
    triangular 2*sqrt(d/a) otherwise."""
    d = math.dist((start.x, start.y, start.z), (end.x, end.y, end.z))
    v, a = limits.v_max, limits.a_max
    if d == 0.0:
        return TrajectoryProfile(start, end, v, a, 0.0, 0.0, cruise=False)
    if d >= v * v / a:
        duration = d / v + v / a
        cruise = True
    else:
        duration = 2.0 * math.sqrt(d / a)
        cruise = False
    return TrajectoryProfile(start, end, v, a, d, duration, cruise)


# -- safety profiles ------------------------------------------------------------------


@dataclass(frozen=True)
class SafetyProfile:
    """Conservative motion and supervision settings for a study arm."""

    name: str
    limits: TrajectoryLimits
    execution_noise_mm: float
    require_fire_approval: bool
    assistant_dwell_s: float = 5.0
    bite_duration_s: float = 1.0
    tension_duration_s: float = 1.5
    retract_offset_mm: float = 20.0
    camera_transition_speed_mm_s: float = 10.0


EX_VIVO = SafetyProfile(
    name="ex_vivo",
    limits=TrajectoryLimits(v_max=20.0, a_max=200.0),
    execution_noise_mm=0.3,
    require_fire_approval=False,
)

IN_VIVO = SafetyProfile(
    name="in_vivo",
    limits=TrajectoryLimits(v_max=10.0, a_max=100.0),
    execution_noise_mm=0.3,
    require_fire_approval=True,
)

PROFILES = {p.name: p for p in (EX_VIVO, IN_VIVO)}


# -- stitch execution ------------------------------------------------------------------


@dataclass
class StitchResult:
    wall: Wall
    plan_index: int
    attempt: int
    planned: Point3
    offset: tuple[float, float, float]
    achieved_world: Point3 | None
    achieved_material: Point3 | None
    success: bool
    fail_reason: str
    dispatch_time: float
    arrival_time: float
    arrived_in_plateau: bool
    primitive_times: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "wall": self.wall.value,
            "plan_index": self.plan_index,
            "attempt": self.attempt,
            "planned": [self.planned.x, self.planned.y, self.planned.z],
            "offset": list(self.offset),
            "achieved_world": (
                [self.achieved_world.x, self.achieved_world.y, self.achieved_world.z]
                if self.achieved_world
                else None
            ),
            "achieved_material": (
                [
                    self.achieved_material.x,
                    self.achieved_material.y,
                    self.achieved_material.z,
                ]
                if self.achieved_material
                else None
            ),
            "success": self.success,
            "fail_reason": self.fail_reason,
            "dispatch_time": self.dispatch_time,
            "arrival_time": self.arrival_time,
            "arrived_in_plateau": self.arrived_in_plateau,
            "primitive_times": dict(self.primitive_times),
        }


class Executor:
    """Holds tool and camera state; fires stitches against the tissue truth."""

    HOME_POSITION = Point3(0.0, -40.0, 30.0)

    def __init__(
        self,
        profile: SafetyProfile = EX_VIVO,
        port: RcmPort | None = None,
        rng: np.random.Generator | None = None,
        imaging_distance_mm: float = 65.0,
    ):
        if not (50.0 <= imaging_distance_mm <= 80.0):
            raise ValueError("imaging working distance must be within [50, 80] mm")
        self.profile = profile
        self.port = port or RcmPort()
        self.rng = rng or np.random.default_rng(0)
        self.tool_position = self.HOME_POSITION
        self.camera_mode = CameraMode.IMAGING
        self.imaging_distance_mm = imaging_distance_mm
        self.stitch_in_flight = False

    # -- camera -----------------------------------------------------------------

    @property
    def camera_distance_mm(self) -> float:
        if self.camera_mode is CameraMode.IMAGING:
            return self.imaging_distance_mm
        return self.imaging_distance_mm + 40.0

    def set_camera_mode(self, mode: CameraMode) -> tuple[float, float]:
        """Switch modes; returns (new distance, transition duration seconds).

        Suture mode retracts the camera 40 mm behind the measurement position.
        """
        if self.stitch_in_flight:
            raise StitchInFlight("cannot move the camera while a stitch is in flight")
        if mode is self.camera_mode:
            return self.camera_distance_mm, 0.0
        self.camera_mode = mode
        duration = 40.0 / self.profile.camera_transition_speed_mm_s
        return self.camera_distance_mm, duration

    # -- motion ------------------------------------------------------------------

    def approach_trajectory(self, target: Point3) -> TrajectoryProfile:
        solve_rcm(target, self.port)  # raises if the pose is unreachable
        return plan_trajectory(self.tool_position, target, self.profile.limits)

    def estimate_travel_time(self, target: Point3, literal_d_over_v: bool = True) -> float:
        """Trigger-time travel estimate. The literal distance/velocity form is
        the default; the trapezoidal duration is the refined option."""
        d = math.dist(
            (self.tool_position.x, self.tool_position.y, self.tool_position.z),
            (target.x, target.y, target.z),
        )
        if literal_d_over_v:
            return d / self.profile.limits.v_max
        return plan_trajectory(self.tool_position, target, self.profile.limits).duration

    def retract_trajectory(self, from_point: Point3) -> TrajectoryProfile:
        direction = from_point.as_array() - self.port.port_point.as_array()
        direction = direction / np.linalg.norm(direction)
        back = from_point.as_array() - self.profile.retract_offset_mm * direction
        return plan_trajectory(from_point, Point3.from_array(back), self.profile.limits)

    # -- firing -------------------------------------------------------------------

    def fire(
        self,
        point: SuturePoint,
        offset: tuple[float, float, float],
        plan_material: np.ndarray,
        tissue: TissueState,
        jaw_box,
    ) -> tuple[bool, Point3, Point3, str]:
        """Fire the needle at planned + offset (+ execution noise).

        Success requires both tissue layers inside the jaw capture box at fire
        time, using the tissue ground truth. Returns (success, achieved_world,
        achieved_material, fail_reason) and leaves the tool at the achieved
        position.
        """
        noise = self.rng.normal(scale=self.profile.execution_noise_mm, size=3)
        achieved = point.position.as_array() + np.asarray(offset, dtype=float) + noise
        achieved_pt = Point3.from_array(achieved)
        pose = solve_rcm(achieved_pt, self.port)
        x, y, z = tool_frame_axes(pose.direction_array())
        layer_a, layer_b = tissue.layer_points_world(point.wall, plan_material)
        ok = True
        for layer in (layer_a, layer_b):
            rel = layer - achieved
            local = np.array([rel @ x, rel @ y, rel @ z])
            lo = np.asarray(jaw_box.lo)
            hi = np.asarray(jaw_box.hi)
            if not np.all((local >= lo) & (local <= hi)):
                ok = False
                break
        self.tool_position = achieved_pt
        material = tissue.to_material(point.wall, achieved)
        reason = "" if ok else "bite_missed_tissue"
        return ok, achieved_pt, Point3.from_array(material), reason
