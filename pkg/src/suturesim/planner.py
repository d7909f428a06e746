"""Suture plan generation on a captured cloud: marker-anchored inset path,
3 mm spacing, uniform vs corner-reinforced plans, noise prefiltering,
tool-collision prediction, and the deformation replan rule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .core import GeometryError, MarkerId, Point3, PointCloud, Pose, Wall


class DegenerateGeometry(GeometryError):
    pass


class MarkersMissing(GeometryError):
    pass


class MarkerSetMismatch(GeometryError):
    pass


class StitchKind(str, Enum):
    KNOT = "knot"
    RUNNING = "running"
    CORNER = "corner"


class PlanMode(str, Enum):
    UNIFORM = "uniform"
    CORNER_REINFORCED = "corner_reinforced"


@dataclass(frozen=True)
class PlanParameters:
    spacing_mm: float = 3.0
    bite_depth_mm: float = 3.0
    tissue_thickness_mm: float = 3.0  # informational
    corner_reinforcement: bool = False

    def __post_init__(self) -> None:
        if self.spacing_mm <= 0:
            raise ValueError("spacing must be positive")
        if self.bite_depth_mm <= 0:
            raise ValueError("bite depth must be positive")


@dataclass(frozen=True)
class SuturePoint:
    position: Point3
    normal: tuple[float, float, float]
    kind: StitchKind
    wall: Wall
    index: int
    segment: int = 0

    def to_dict(self) -> dict:
        return {
            "position": [self.position.x, self.position.y, self.position.z],
            "normal": list(self.normal),
            "kind": self.kind.value,
            "wall": self.wall.value,
            "index": self.index,
            "segment": self.segment,
        }

    @staticmethod
    def from_dict(d: dict) -> "SuturePoint":
        return SuturePoint(
            position=Point3(*d["position"]),
            normal=tuple(d["normal"]),
            kind=StitchKind(d["kind"]),
            wall=Wall(d["wall"]),
            index=int(d["index"]),
            segment=int(d.get("segment", 0)),
        )


@dataclass(frozen=True)
class SuturePlan:
    points: tuple[SuturePoint, ...]
    mode: PlanMode
    snapshot_id: int
    plan_id: int = 0
    usable: bool = True
    reason: str = ""

    def wall_points(self, wall: Wall) -> list[SuturePoint]:
        return [p for p in self.points if p.wall is wall]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "snapshot_id": self.snapshot_id,
            "plan_id": self.plan_id,
            "usable": self.usable,
            "reason": self.reason,
            "points": [p.to_dict() for p in self.points],
        }

    @staticmethod
    def from_dict(d: dict) -> "SuturePlan":
        return SuturePlan(
            points=tuple(SuturePoint.from_dict(p) for p in d["points"]),
            mode=PlanMode(d["mode"]),
            snapshot_id=int(d["snapshot_id"]),
            plan_id=int(d.get("plan_id", 0)),
            usable=bool(d["usable"]),
            reason=d.get("reason", ""),
        )


# -- plan generation -----------------------------------------------------------------


def _fit_plane_normal(points: np.ndarray, towards: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    if float(np.dot(normal, towards)) < 0:
        normal = -normal
    return normal / np.linalg.norm(normal)


def _near_polyline_mask(cloud: np.ndarray, verts: np.ndarray, radius: float) -> np.ndarray:
    best = np.full(cloud.shape[0], np.inf)
    for i in range(len(verts) - 1):
        a, b = verts[i], verts[i + 1]
        ab = b - a
        denom = float(np.dot(ab, ab))
        t = np.clip((cloud - a) @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(cloud))
        d = np.linalg.norm(cloud - (a + t[:, None] * ab), axis=1)
        np.minimum(best, d, out=best)
    return best <= radius


def polyline_min_distance(point: np.ndarray, verts: np.ndarray) -> float:
    """Minimum distance from a point to a polyline (shared by the metrics)."""
    best = math.inf
    p = np.asarray(point, dtype=float)
    for i in range(len(verts) - 1):
        a, b = np.asarray(verts[i]), np.asarray(verts[i + 1])
        ab = b - a
        denom = float(np.dot(ab, ab))
        t = max(0.0, min(1.0, float(np.dot(p - a, ab) / denom))) if denom > 0 else 0.0
        best = min(best, float(np.linalg.norm(p - (a + t * ab))))
    return best


def _surface_height(point: np.ndarray, cloud: np.ndarray, normal: np.ndarray, radius: float = 2.0) -> float:
    """Mean offset of nearby cloud points along the wall normal (surface snap)."""
    d = np.linalg.norm(cloud - point[None, :], axis=1)
    near = cloud[d <= radius]
    if near.shape[0] == 0:
        return 0.0
    return float(np.mean((near - point[None, :]) @ normal))


def _wall_path(
    ordered: Sequence[Point3],
    cloud: np.ndarray,
    params: PlanParameters,
    camera_side: np.ndarray,
) -> tuple[np.ndarray, list[np.ndarray], np.ndarray, np.ndarray]:
    """Inset marker polyline: vertices, per-segment inward normals, plane
    normal, and this wall's own sheet of cloud points."""
    verts = np.array([p.as_array() for p in ordered])
    mask = _near_polyline_mask(cloud, verts, radius=params.bite_depth_mm + 6.0)
    nearby = cloud[mask]
    if nearby.shape[0] < 8:
        raise DegenerateGeometry("too few cloud points near the marker path")
    # The neighborhood can graze the opposite wall's sheet (the two walls sit
    # only a tissue thickness apart), so isolate this wall's own sheet: seed
    # the plane fit from a tight band around the marker polyline, then refine
    # inliers against the slab through the markers themselves.
    seed_mask = _near_polyline_mask(cloud, verts, radius=2.5)
    seed = cloud[seed_mask]
    if seed.shape[0] < 8:
        seed = nearby
    plane_n = _fit_plane_normal(seed, towards=camera_side)
    marker_centroid = verts.mean(axis=0)
    sheet = seed
    for _ in range(3):
        offsets = (nearby - marker_centroid[None, :]) @ plane_n
        inliers = nearby[np.abs(offsets) <= 1.2]
        if inliers.shape[0] < 8:
            break
        sheet = inliers
        plane_n = _fit_plane_normal(sheet, towards=camera_side)

    inward: list[np.ndarray] = []
    for i in range(len(verts) - 1):
        a, b = verts[i], verts[i + 1]
        seg = b - a
        seg_len = float(np.linalg.norm(seg))
        if seg_len < 1e-9:
            raise DegenerateGeometry("coincident markers")
        d_hat = seg / seg_len
        m_hat = np.cross(plane_n, d_hat)
        m_hat = m_hat / np.linalg.norm(m_hat)
        ab = 0.5 * (a + b)
        side_mask = _near_polyline_mask(sheet, np.array([a, b]), radius=params.bite_depth_mm + 6.0)
        side_pts = sheet[side_mask]
        side = float(np.mean((side_pts - ab[None, :]) @ m_hat)) if side_pts.shape[0] else 1.0
        if side < 0:
            m_hat = -m_hat
        inward.append(m_hat)

    h = params.bite_depth_mm
    inset = np.empty_like(verts)
    inset[0] = verts[0] + h * inward[0]
    inset[-1] = verts[-1] + h * inward[-1]
    for i in range(1, len(verts) - 1):
        n_prev, n_next = inward[i - 1], inward[i]
        denom = 1.0 + float(np.dot(n_prev, n_next))
        if denom < 1e-6:
            raise DegenerateGeometry("marker path folds back on itself")
        inset[i] = verts[i] + h * (n_prev + n_next) / denom
    return inset, inward, plane_n, sheet


def _sample_segments(inset: np.ndarray, spacing: float) -> list[tuple[np.ndarray, int, bool]]:
    """Points every ``spacing`` along each inset segment, endpoints included.

    Returns (position, segment index, is_corner_anchor) triplets; the shared
    vertex of adjacent segments appears once.
    """
    out: list[tuple[np.ndarray, int, bool]] = []
    for s in range(len(inset) - 1):
        a, b = inset[s], inset[s + 1]
        seg_len = float(np.linalg.norm(b - a))
        d_hat = (b - a) / seg_len
        arcs = [i * spacing for i in range(int(math.floor(seg_len / spacing)) + 1)]
        # The marker anchor terminates every segment; a remainder shorter than
        # half a spacing merges into it instead of spawning a sliver interval.
        if seg_len - arcs[-1] < spacing / 2.0 and len(arcs) > 1:
            arcs.pop()
        arcs.append(seg_len)
        for arc in arcs:
            if s > 0 and arc == 0.0:
                continue  # shared corner already emitted by the previous segment
            is_anchor = arc == 0.0 or abs(arc - seg_len) < 1e-12
            out.append((a + arc * d_hat, s, is_anchor))
    return out


def _corner_extras(inset: np.ndarray, spacing: float) -> list[tuple[np.ndarray, int]]:
    """One extra stitch per marker corner at half spacing into the wall."""
    extras: list[tuple[np.ndarray, int]] = []
    half = spacing / 2.0
    for v in range(len(inset)):
        if v < len(inset) - 1:
            a, b = inset[v], inset[v + 1]
            seg = v
        else:
            a, b = inset[v], inset[v - 1]
            seg = v - 1
        direction = (b - a) / np.linalg.norm(b - a)
        extras.append((a + half * direction, seg))
    return extras


def generate_plans(
    cloud: PointCloud,
    ordered_markers: Mapping[Wall, Sequence[Point3]],
    params: PlanParameters,
    plan_id_base: int = 0,
    camera_side: Sequence[float] = (0.0, -1.0, 0.0),
) -> tuple[SuturePlan, SuturePlan]:
    """Build the Uniform and CornerReinforced plan pair for one capture.

    The path per wall is the ordered marker polyline inset by the bite depth
    along the tissue surface, snapped onto the local cloud; stitches sit
    every ``spacing_mm`` of arclength with segment endpoints included. The
    first stitch of each wall is the knot.
    """
    for wall in (Wall.BACK, Wall.FRONT):
        if wall not in ordered_markers or len(ordered_markers[wall]) < 2:
            raise MarkersMissing(f"no ordered markers for {wall.value} wall")
    pts = cloud.points
    cam = np.asarray(camera_side, dtype=float)

    def build(mode: PlanMode, plan_id: int) -> SuturePlan:
        out: list[SuturePoint] = []
        index = 0
        for wall in (Wall.BACK, Wall.FRONT):
            inset, _, plane_n, sheet = _wall_path(ordered_markers[wall], pts, params, cam)
            arclen = float(sum(np.linalg.norm(inset[i + 1] - inset[i]) for i in range(len(inset) - 1)))
            if arclen < 2.0 * params.spacing_mm:
                raise DegenerateGeometry(
                    f"{wall.value} marker path ({arclen:.1f} mm) shorter than twice the spacing"
                )
            samples = _sample_segments(inset, params.spacing_mm)
            entries = [(pos, seg, 0.0) for pos, seg, _ in samples]
            if mode is PlanMode.CORNER_REINFORCED:
                # Tag extras with a sub-sort key so they land next to their corner.
                for pos, seg in _corner_extras(inset, params.spacing_mm):
                    entries.append((pos, seg, 0.5))
            # Order along the path: by segment, then arclength within segment.
            def sort_key(entry):
                pos, seg, _sub = entry
                return (seg, float(np.linalg.norm(pos - inset[seg])))

            entries.sort(key=sort_key)
            normal_t = tuple(float(c) for c in plane_n)
            first = True
            for pos, seg, sub in entries:
                snapped = pos + _surface_height(pos, sheet, plane_n) * plane_n
                kind = StitchKind.KNOT if first else (
                    StitchKind.CORNER if sub else StitchKind.RUNNING
                )
                out.append(
                    SuturePoint(
                        position=Point3.from_array(snapped),
                        normal=normal_t,
                        kind=kind,
                        wall=wall,
                        index=index,
                        segment=seg,
                    )
                )
                first = False
                index += 1
        return SuturePlan(
            points=tuple(out), mode=mode, snapshot_id=cloud.frame_id, plan_id=plan_id
        )

    uniform = build(PlanMode.UNIFORM, plan_id_base)
    corner = build(PlanMode.CORNER_REINFORCED, plan_id_base + 1)
    return uniform, corner


# -- prefilter -----------------------------------------------------------------------


@dataclass(frozen=True)
class PrefilterResult:
    plan: SuturePlan | None
    rejected: bool
    reason: str = ""
    max_deviation_mm: float = 0.0


def prefilter(
    plan: SuturePlan,
    cloud: PointCloud,
    roughness_tol_mm: float = 1.0,
) -> PrefilterResult:
    """Smooth each wall segment with a least-squares polynomial along
    arclength; reject the plan as noisy if any point strays beyond the
    roughness tolerance or the surface normals flip between neighbors.

    Deviations are leave-one-out residuals (ordinary residual divided by
    1 - leverage), so an outlier near a segment end cannot hide by dragging
    the fit toward itself.
    """
    new_points: list[SuturePoint] = []
    max_dev = 0.0
    for wall in (Wall.BACK, Wall.FRONT):
        wall_pts = plan.wall_points(wall)
        for i in range(len(wall_pts) - 1):
            a = np.array(wall_pts[i].normal)
            b = np.array(wall_pts[i + 1].normal)
            if float(np.dot(a, b)) < 0:
                return PrefilterResult(None, True, reason="normal_flip")
        segments: dict[int, list[SuturePoint]] = {}
        for p in wall_pts:
            segments.setdefault(p.segment, []).append(p)
        for seg_points in segments.values():
            coords = np.array([p.position.as_array() for p in seg_points])
            n = len(seg_points)
            t = np.concatenate(
                [[0.0], np.cumsum(np.linalg.norm(np.diff(coords, axis=0), axis=1))]
            )
            degree = 3 if n >= 8 else 1
            degree = min(degree, n - 1)
            design = np.vander(t, degree + 1)
            hat = design @ np.linalg.pinv(design)
            smoothed = hat @ coords
            resid = coords - smoothed
            leverage = np.clip(np.diag(hat), 0.0, 0.999)
            loo = np.linalg.norm(resid, axis=1) / (1.0 - leverage)
            max_dev = max(max_dev, float(loo.max()))
            if float(loo.max()) > roughness_tol_mm:
                return PrefilterResult(
                    None, True, reason="noisy", max_deviation_mm=float(loo.max())
                )
            for p, pos in zip(seg_points, smoothed):
                new_points.append(replace(p, position=Point3.from_array(pos)))
    new_points.sort(key=lambda p: p.index)
    return PrefilterResult(
        plan=replace(plan, points=tuple(new_points)),
        rejected=False,
        max_deviation_mm=max_dev,
    )


# -- collision prediction ---------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned extents in the tool frame, millimeters; inclusive bounds."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts >= lo[None, :]) & (pts <= hi[None, :]), axis=1)


@dataclass(frozen=True)
class CollisionPolicy:
    """Jaw: a 6 mm capture cube at the tip. Body: a 5 mm-square shaft section
    starting one jaw-depth behind the tip."""

    ratio_threshold: float = 0.80
    jaw_capture_box: Box = Box(lo=(-3.0, -3.0, -3.0), hi=(3.0, 3.0, 3.0))
    tool_body_box: Box = Box(lo=(-2.5, -2.5, -60.0), hi=(2.5, 2.5, -4.0))

    def __post_init__(self) -> None:
        if not (0.0 < self.ratio_threshold < 1.0):
            raise ValueError("ratio_threshold must be in (0, 1)")


def tool_frame_axes(shaft_direction: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic orthonormal tool frame; z is the shaft (port-to-tip)."""
    z = np.asarray(shaft_direction, dtype=float)
    z = z / np.linalg.norm(z)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(z, ref))) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    x = np.cross(ref, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return x, y, z


@dataclass(frozen=True)
class CollisionVerdict:
    usable: bool
    ratio: float
    colliding: int
    fitting: int
    reason: str = ""


def predict_collision(
    point_position: Point3,
    tool_pose: Pose,
    cloud: PointCloud,
    policy: CollisionPolicy,
) -> CollisionVerdict:
    """Count cloud points inside the tool body (colliding) versus inside the
    jaw capture box (fitting); warn when colliding/fitting strictly exceeds
    the ratio threshold, or when the jaw captures nothing at all."""
    x, y, z = tool_frame_axes(tool_pose.direction_array())
    origin = point_position.as_array()
    rel = cloud.points - origin[None, :]
    local = np.stack([rel @ x, rel @ y, rel @ z], axis=1)
    colliding = int(np.count_nonzero(policy.tool_body_box.contains(local)))
    fitting = int(np.count_nonzero(policy.jaw_capture_box.contains(local)))
    if fitting == 0:
        return CollisionVerdict(
            usable=False, ratio=math.inf, colliding=colliding, fitting=0,
            reason="empty_jaw",
        )
    ratio = colliding / fitting
    if ratio > policy.ratio_threshold:
        return CollisionVerdict(
            usable=False, ratio=ratio, colliding=colliding, fitting=fitting,
            reason="collision_ratio",
        )
    return CollisionVerdict(usable=True, ratio=ratio, colliding=colliding, fitting=fitting)


# -- deformation check ---------------------------------------------------------------


@dataclass(frozen=True)
class DeformationPolicy:
    """Replan when any marker moves beyond half the tool jaw width."""

    per_marker_threshold_mm: float = 3.0

    def __post_init__(self) -> None:
        if self.per_marker_threshold_mm <= 0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class DeformationVerdict:
    replan_recommended: bool
    max_displacement_mm: float
    per_marker_mm: dict[str, float]


def check_deformation(
    baseline: Mapping[MarkerId, Point3],
    current: Mapping[MarkerId, Point3],
    policy: DeformationPolicy = DeformationPolicy(),
) -> DeformationVerdict:
    """Strict rule: recommend a replan iff any marker's norm displacement
    exceeds the threshold."""
    base_ids = set(baseline)
    cur_ids = set(current)
    if base_ids != cur_ids:
        raise MarkerSetMismatch(
            f"marker ids differ: {sorted(m.value for m in base_ids ^ cur_ids)}"
        )
    per: dict[str, float] = {}
    for mid in sorted(base_ids, key=lambda m: m.value):
        d = math.dist(
            (baseline[mid].x, baseline[mid].y, baseline[mid].z),
            (current[mid].x, current[mid].y, current[mid].z),
        )
        per[mid.value] = d
    max_d = max(per.values()) if per else 0.0
    return DeformationVerdict(
        replan_recommended=max_d > policy.per_marker_threshold_mm,
        max_displacement_mm=max_d,
        per_marker_mm=per,
    )
