"""Synthetic deformable-tissue simulator: breathing, stay-suture deformation
events, NIR frame rendering, and point-cloud capture.

The tissue is a flat-ish ribbon per wall (a simplification of the two
approximated lumen ends). All ribbon geometry is defined in a material frame;
breathing and deformation displace whole walls rigidly in the world frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .core import (
    GeometryError,
    Marker,
    MarkerId,
    MarkerSet,
    Point3,
    PointCloud,
    Pose,
    WALL_MARKER_IDS,
    Wall,
    unit,
)


class BreathState(Enum):
    MOVING = "moving"
    STATIONARY = "stationary"


class TissueMoving(RuntimeError):
    """Raised when a capture is requested while the tissue is in motion."""


class MarkerOutOfView(RuntimeError):
    def __init__(self, marker_id: MarkerId, detail: str):
        super().__init__(f"marker {marker_id.value} out of view: {detail}")
        self.marker_id = marker_id


@dataclass(frozen=True)
class BreathingProfile:
    """Cyclic vertical tissue motion: raised-cosine bump plus a rest plateau.

    The plateau is centered on whole multiples of the period, so a tool that
    arrives at time n*T lands in the middle of the stationary window.
    """

    period_s: float = 60.0 / 14.0
    amplitude_mm: float = 3.0
    stationary_fraction: float = 0.30
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        if self.period_s <= 0:
            raise ValueError("period_s must be positive")
        if self.amplitude_mm < 0:
            raise ValueError("amplitude_mm must be >= 0")
        if not (0.0 < self.stationary_fraction < 1.0):
            raise ValueError("stationary_fraction must be in (0, 1)")
        object.__setattr__(self, "axis", unit(self.axis))

    @property
    def plateau_half_s(self) -> float:
        return 0.5 * self.stationary_fraction * self.period_s

    def displacement_at(self, phase_s: float) -> float:
        """Scalar displacement along ``axis`` for a cycle phase in seconds."""
        phi = phase_s % self.period_s
        h = self.plateau_half_s
        if phi < h or phi >= self.period_s - h:
            return 0.0
        motion_span = self.period_s - 2.0 * h
        tau = (phi - h) / motion_span
        return self.amplitude_mm * 0.5 * (1.0 - math.cos(2.0 * math.pi * tau))

    def state_at(self, phase_s: float) -> BreathState:
        phi = phase_s % self.period_s
        h = self.plateau_half_s
        if phi < h or phi >= self.period_s - h:
            return BreathState.STATIONARY
        return BreathState.MOVING

    def in_plateau(self, t: float) -> bool:
        return self.state_at(t) is BreathState.STATIONARY

    def transition_times(self, t_start: float, t_end: float) -> list[tuple[float, str]]:
        """Ground-truth transitions in [t_start, t_end): ``stop`` is the
        moving-to-stationary edge, ``start`` the stationary-to-moving edge."""
        out: list[tuple[float, str]] = []
        h = self.plateau_half_s
        n0 = math.floor(t_start / self.period_s) - 1
        n1 = math.ceil(t_end / self.period_s) + 1
        for n in range(n0, n1 + 1):
            start_moving = n * self.period_s + h
            stop_moving = (n + 1) * self.period_s - h
            if t_start <= start_moving < t_end:
                out.append((start_moving, "start"))
            if t_start <= stop_moving < t_end:
                out.append((stop_moving, "stop"))
        out.sort()
        return out


def _polyline(points: list[tuple[float, float, float]]) -> np.ndarray:
    return np.asarray(points, dtype=float)


@dataclass(frozen=True)
class TissueGeometry:
    """Material-frame ribbon description for both walls.

    Markers sit on the cut tissue edge; the suturable band extends inward
    from the edge. Edge polylines are the ground truth for bite-depth scoring.
    """

    marker_rest: Mapping[MarkerId, Point3]
    edge_material: Mapping[Wall, np.ndarray]
    inward_normals: Mapping[Wall, list[np.ndarray]]
    band_inner_mm: float = 8.0
    thickness_mm: float = 3.0
    layer_gap_mm: float = 1.0

    @staticmethod
    def default() -> "TissueGeometry":
        # Back wall: an L-shaped edge (vertical leg then the long run), with
        # the tissue interior on the inside of the corner. Front wall: one
        # straight 30 mm edge. Segment lengths are multiples of 3 mm so that
        # a 3 mm-spaced plan lands exactly on the marker anchors.
        back_edge = _polyline([(-18.0, 0.0, 9.0), (-18.0, 0.0, -3.0), (15.0, 0.0, -3.0)])
        front_edge = _polyline([(-15.0, 3.0, -6.0), (15.0, 3.0, -6.0)])
        markers = {
            MarkerId.TOP: Point3(-18.0, 0.0, 9.0),
            MarkerId.LEFT: Point3(-18.0, 0.0, -3.0),
            MarkerId.RIGHT: Point3(15.0, 0.0, -3.0),
            MarkerId.FRONT_LEFT: Point3(-15.0, 3.0, -6.0),
            MarkerId.FRONT_RIGHT: Point3(15.0, 3.0, -6.0),
        }
        normals = {
            Wall.BACK: [np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])],
            Wall.FRONT: [np.array([0.0, 0.0, 1.0])],
        }
        return TissueGeometry(
            marker_rest=markers, edge_material=dict(
                {Wall.BACK: back_edge, Wall.FRONT: front_edge}
            ),
            inward_normals=normals,
        )

    def wall_of(self, marker_id: MarkerId) -> Wall:
        for wall, ids in WALL_MARKER_IDS.items():
            if marker_id in ids:
                return wall
        raise GeometryError(f"unknown marker {marker_id}")


@dataclass(frozen=True)
class NirFrame:
    """Rendered near-infrared view; ``pixels`` is (H, W) float32 in [0, 1]."""

    pixels: np.ndarray
    timestamp: float

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise GeometryError("NIR frame pixels must be 2-D")
        object.__setattr__(self, "pixels", px)


class TissueState:
    """Single-owner mutable tissue state advanced by the simulation clock."""

    def __init__(
        self,
        geometry: TissueGeometry | None = None,
        breathing: BreathingProfile | None = None,
        phase_s: float = 0.0,
    ):
        self.geometry = geometry or TissueGeometry.default()
        self.breathing = breathing or BreathingProfile()
        self.phase_s = float(phase_s)
        self.deformation_offset: dict[MarkerId, np.ndarray] = {
            mid: np.zeros(3) for mid in self.geometry.marker_rest
        }
        self.wall_offset: dict[Wall, np.ndarray] = {w: np.zeros(3) for w in Wall}
        self.capture_counter = 0

    # -- clock ---------------------------------------------------------------

    def step(self, dt: float) -> None:
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.phase_s = (self.phase_s + dt) % self.breathing.period_s

    def breath_state(self) -> BreathState:
        return self.breathing.state_at(self.phase_s)

    def breathing_displacement(self) -> np.ndarray:
        d = self.breathing.displacement_at(self.phase_s)
        return d * np.asarray(self.breathing.axis)

    # -- world-frame queries ---------------------------------------------------

    def wall_displacement(self, wall: Wall) -> np.ndarray:
        """Total rigid displacement (breathing + deformation) of a wall."""
        return self.breathing_displacement() + self.wall_offset[wall]

    def marker_position(self, mid: MarkerId) -> Point3:
        rest = self.geometry.marker_rest[mid].as_array()
        world = rest + self.breathing_displacement() + self.deformation_offset[mid]
        return Point3.from_array(world)

    def markers_world(self, wall: Wall) -> MarkerSet:
        return MarkerSet(
            [Marker(mid, self.marker_position(mid)) for mid in WALL_MARKER_IDS[wall]],
            wall=wall,
        )

    def all_marker_positions(self) -> dict[MarkerId, Point3]:
        return {mid: self.marker_position(mid) for mid in self.geometry.marker_rest}

    def edge_polyline_world(self, wall: Wall) -> np.ndarray:
        return self.geometry.edge_material[wall] + self.wall_displacement(wall)

    def edge_polyline_material(self, wall: Wall) -> np.ndarray:
        return np.array(self.geometry.edge_material[wall])

    def to_material(self, wall: Wall, world_point: np.ndarray) -> np.ndarray:
        """Map a world point onto the wall's material frame at the current time."""
        return np.asarray(world_point, dtype=float) - self.wall_displacement(wall)

    def layer_points_world(self, wall: Wall, material_point: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth positions of the two tissue layers at a stitch site."""
        p = np.asarray(material_point, dtype=float) + self.wall_displacement(wall)
        gap = 0.5 * self.geometry.layer_gap_mm
        offset = np.array([0.0, gap, 0.0])
        return p - offset, p + offset

    # -- surface sampling -------------------------------------------------------

    def surface_points(self, spacing_mm: float = 0.75, rows: int = 11) -> np.ndarray:
        """Sample the suturable band of both walls, world frame."""
        pts: list[np.ndarray] = []
        for wall in (Wall.BACK, Wall.FRONT):
            edge = self.geometry.edge_material[wall]
            normals = self.geometry.inward_normals[wall]
            disp = self.wall_displacement(wall)
            depths = np.linspace(0.0, self.geometry.band_inner_mm, rows)
            for seg in range(len(edge) - 1):
                a, b = edge[seg], edge[seg + 1]
                n = normals[seg]
                seg_len = float(np.linalg.norm(b - a))
                count = max(2, int(round(seg_len / spacing_mm)) + 1)
                ts = np.linspace(0.0, 1.0, count)
                base = a[None, :] + ts[:, None] * (b - a)[None, :]
                for d in depths:
                    pts.append(base + d * n[None, :] + disp[None, :])
        return np.concatenate(pts, axis=0)


def inject_deformation(
    state: TissueState,
    rng: np.random.Generator,
    magnitude_range_mm: tuple[float, float],
) -> dict[str, list[float]]:
    """Stay-suture manipulation: a shared rigid pull on the staged tissue.

    One direction is sampled uniformly on the sphere and one magnitude from
    the given range; each wall then gets a slightly perturbed copy (the walls
    are partially bound together by placed stitches, so they move almost, but
    not exactly, in unison). All markers of a wall move together; every
    applied wall vector's norm stays inside the magnitude range. Returns the
    applied vectors keyed by wall for the run log.
    """
    lo, hi = float(magnitude_range_mm[0]), float(magnitude_range_mm[1])
    if lo < 0 or hi < lo:
        raise ValueError("magnitude range must satisfy 0 <= lo <= hi")
    direction = rng.normal(size=3)
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        direction = np.array([1.0, 0.0, 0.0])
        norm = 1.0
    direction = direction / norm
    shared_mag = float(rng.uniform(lo, hi))
    applied: dict[str, list[float]] = {}
    for wall in (Wall.BACK, Wall.FRONT):
        wobble = rng.normal(scale=0.05, size=3)
        d = direction + wobble
        d = d / np.linalg.norm(d)
        mag = float(np.clip(shared_mag + rng.uniform(-0.25, 0.25), lo, hi))
        vec = mag * d
        state.wall_offset[wall] = state.wall_offset[wall] + vec
        for mid in WALL_MARKER_IDS[wall]:
            state.deformation_offset[mid] = state.deformation_offset[mid] + vec
        applied[wall.value] = [float(v) for v in vec]
    return applied


def capture_cloud(
    state: TissueState,
    noise_sigma_mm: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PointCloud:
    """Capture the surface as a point cloud; only valid while stationary."""
    if state.breath_state() is not BreathState.STATIONARY:
        raise TissueMoving(
            "point cloud capture requested while tissue is moving; "
            "wait for the breathing plateau"
        )
    pts = state.surface_points()
    if noise_sigma_mm > 0:
        if rng is None:
            raise ValueError("noise_sigma_mm > 0 requires an rng")
        pts = pts + rng.normal(scale=noise_sigma_mm, size=pts.shape)
    state.capture_counter += 1
    return PointCloud(points=pts, frame_id=state.capture_counter)


# -- NIR rendering ---------------------------------------------------------------


@dataclass(frozen=True)
class NirCamera:
    """Pinhole NIR camera model. ``focal_px`` is recorded config, not normative."""

    pose: Pose
    width: int = 640
    height: int = 480
    focal_px: float = 810.0
    blob_sigma_mm: float = 0.8

    @staticmethod
    def facing_tissue(distance_mm: float, target: Point3 = Point3(0.0, 0.0, 0.0)) -> "NirCamera":
        pos = Point3(target.x, target.y - distance_mm, target.z)
        return NirCamera(pose=Pose(position=pos, direction=(0.0, 1.0, 0.0)))

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axis = self.pose.direction_array()
        world_up = np.array([0.0, 0.0, 1.0])
        if abs(float(np.dot(axis, world_up))) > 0.999:
            world_up = np.array([1.0, 0.0, 0.0])
        right = np.cross(axis, world_up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, axis)
        up = up / np.linalg.norm(up)
        return axis, right, up

    def project(self, world_point: np.ndarray) -> tuple[float, float, float]:
        """Return (u, v, depth); u is the column, v the row (grows downward)."""
        axis, right, up = self.basis()
        rel = np.asarray(world_point, dtype=float) - self.pose.position.as_array()
        depth = float(np.dot(rel, axis))
        if depth <= 1e-9:
            return (math.nan, math.nan, depth)
        u = self.width / 2.0 + self.focal_px * float(np.dot(rel, right)) / depth
        v = self.height / 2.0 - self.focal_px * float(np.dot(rel, up)) / depth
        return (u, v, depth)


MIN_CAMERA_DISTANCE_MM = 30.0
MAX_CAMERA_DISTANCE_MM = 100.0


def render_nir(
    state_or_markers,
    camera: NirCamera,
    distance_mm: float,
    timestamp: float = 0.0,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> NirFrame:
    """Render the markers as Gaussian blobs through the pinhole camera.

    ``state_or_markers`` is either a TissueState or a mapping of marker id to
    Point3. Blob radius scales inversely with depth. Raises MarkerOutOfView
    when any marker projects outside the frame or behind the camera.
    """
    if not (MIN_CAMERA_DISTANCE_MM <= distance_mm <= MAX_CAMERA_DISTANCE_MM):
        raise ValueError(
            f"camera distance {distance_mm} mm outside supported "
            f"[{MIN_CAMERA_DISTANCE_MM}, {MAX_CAMERA_DISTANCE_MM}] mm range"
        )
    if isinstance(state_or_markers, TissueState):
        markers = state_or_markers.all_marker_positions()
    else:
        markers = dict(state_or_markers)

    img = np.zeros((camera.height, camera.width), dtype=np.float64)
    for mid, pos in markers.items():
        u, v, depth = camera.project(pos.as_array())
        if not math.isfinite(u) or depth <= 0:
            raise MarkerOutOfView(mid, "behind camera")
        if not (0 <= u < camera.width and 0 <= v < camera.height):
            raise MarkerOutOfView(mid, f"projects to ({u:.1f}, {v:.1f})")
        sigma_px = camera.focal_px * camera.blob_sigma_mm / depth
        half = max(2, int(math.ceil(4.0 * sigma_px)))
        u0, v0 = int(round(u)), int(round(v))
        c0, c1 = max(0, u0 - half), min(camera.width, u0 + half + 1)
        r0, r1 = max(0, v0 - half), min(camera.height, v0 + half + 1)
        cols = np.arange(c0, c1, dtype=float)
        rows = np.arange(r0, r1, dtype=float)
        du = (cols - u) ** 2
        dv = (rows - v) ** 2
        blob = np.exp(-(dv[:, None] + du[None, :]) / (2.0 * sigma_px**2))
        region = img[r0:r1, c0:c1]
        np.maximum(region, blob, out=region)

    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        img = img + rng.normal(scale=noise_sigma, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return NirFrame(pixels=img.astype(np.float32), timestamp=timestamp)


def blob_centroids(frame: NirFrame, count: int, min_separation_px: float = 8.0) -> list[tuple[float, float]]:
    """Extract ``count`` blob centroids (u, v) by peak picking plus a local
    intensity-weighted mean. Test/measurement helper."""
    img = frame.pixels.astype(np.float64)
    found: list[tuple[float, float]] = []
    work = img.copy()
    h, w = img.shape
    for _ in range(count):
        idx = int(np.argmax(work))
        r, c = divmod(idx, w)
        if work[r, c] <= 0:
            break
        half = int(min_separation_px)
        r0, r1 = max(0, r - half), min(h, r + half + 1)
        c0, c1 = max(0, c - half), min(w, c + half + 1)
        patch = img[r0:r1, c0:c1]
        total = float(patch.sum())
        rows = np.arange(r0, r1, dtype=float)
        cols = np.arange(c0, c1, dtype=float)
        v = float((patch.sum(axis=1) * rows).sum() / total)
        u = float((patch.sum(axis=0) * cols).sum() / total)
        found.append((u, v))
        work[r0:r1, c0:c1] = 0.0
    return found
