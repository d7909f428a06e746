"""Shared geometry primitives, marker identities, and image-order rules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np


class Wall(str, Enum):
    BACK = "back"
    FRONT = "front"


class MarkerId(str, Enum):
    TOP = "top"
    LEFT = "left"
    RIGHT = "right"
    FRONT_LEFT = "front_left"
    FRONT_RIGHT = "front_right"


WALL_MARKER_IDS: dict[Wall, tuple[MarkerId, ...]] = {
    Wall.BACK: (MarkerId.TOP, MarkerId.LEFT, MarkerId.RIGHT),
    Wall.FRONT: (MarkerId.FRONT_LEFT, MarkerId.FRONT_RIGHT),
}


class GeometryError(ValueError):
    pass


class WrongMarkerCount(GeometryError):
    pass


class AmbiguousOrdering(GeometryError):
    """Two markers tie exactly on the coordinate that decides their order."""


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise GeometryError(f"non-finite coordinate: {v!r}")


@dataclass(frozen=True)
class Point3:
    """A point in the world frame, millimeters."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        _check_finite(self.x, self.y, self.z)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a: Sequence[float]) -> "Point3":
        return Point3(float(a[0]), float(a[1]), float(a[2]))

    def translated(self, v: Sequence[float]) -> "Point3":
        return Point3(self.x + float(v[0]), self.y + float(v[1]), self.z + float(v[2]))


def distance(a: Point3, b: Point3) -> float:
    """Euclidean distance in millimeters."""
    return math.sqrt((a.x - b.x) ** 2 + (a.y - b.y) ** 2 + (a.z - b.z) ** 2)


@dataclass(frozen=True)
class Pose:
    """Tool (or camera) pose: a position plus the shaft/view axis direction."""

    position: Point3
    direction: tuple[float, float, float]

    def __post_init__(self) -> None:
        _check_finite(*self.direction)
        n = math.sqrt(sum(c * c for c in self.direction))
        if abs(n - 1.0) > 1e-9:
            raise GeometryError(f"direction must be unit norm, got |d|={n}")

    def direction_array(self) -> np.ndarray:
        return np.array(self.direction, dtype=float)


def unit(v: Sequence[float]) -> tuple[float, float, float]:
    a = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(a))
    if n == 0.0 or not math.isfinite(n):
        raise GeometryError("cannot normalize zero or non-finite vector")
    a = a / n
    return (float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class PointCloud:
    """Captured surface samples; ``points`` is an (N, 3) float array."""

    points: np.ndarray
    frame_id: int

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"point cloud must be (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise GeometryError("captured point cloud must be non-empty")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite points")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class Marker:
    id: MarkerId
    position: Point3
    image_uv: tuple[float, float] | None = None


class MarkerSet:
    """Markers of one wall (or a merged view), keyed by unique id."""

    def __init__(self, markers: Iterable[Marker], wall: Wall | None = None):
        self._markers: dict[MarkerId, Marker] = {}
        for m in markers:
            if m.id in self._markers:
                raise GeometryError(f"duplicate marker id {m.id}")
            self._markers[m.id] = m
        self.wall = wall
        if wall is not None:
            expected = set(WALL_MARKER_IDS[wall])
            if set(self._markers) != expected:
                raise WrongMarkerCount(
                    f"{wall.value} wall needs exactly {sorted(i.value for i in expected)}, "
                    f"got {sorted(i.value for i in self._markers)}"
                )

    def __getitem__(self, mid: MarkerId) -> Marker:
        return self._markers[mid]

    def __contains__(self, mid: MarkerId) -> bool:
        return mid in self._markers

    def __iter__(self):
        return iter(self._markers.values())

    def __len__(self) -> int:
        return len(self._markers)

    def ids(self) -> list[MarkerId]:
        return list(self._markers)

    def positions(self) -> Mapping[MarkerId, Point3]:
        return {mid: m.position for mid, m in self._markers.items()}

    def with_positions(self, positions: Mapping[MarkerId, Point3]) -> "MarkerSet":
        return MarkerSet(
            [Marker(m.id, positions[m.id], m.image_uv) for m in self],
            wall=self.wall,
        )


def order_markers(markers: MarkerSet, wall: Wall) -> list[MarkerId]:
    """Order a wall's markers the way the blob detector labels them.

    Back wall: topmost marker (smallest image row) first, then the left
    (smallest column) and right (largest column) of the remaining two.
    Front wall: left then right by column. Raster convention: row grows
    downward, column grows rightward.
    """
    expected_count = len(WALL_MARKER_IDS[wall])
    if len(markers) != expected_count:
        raise WrongMarkerCount(
            f"{wall.value} wall ordering needs {expected_count} markers, got {len(markers)}"
        )
    entries = []
    for m in markers:
        if m.image_uv is None:
            raise GeometryError(f"marker {m.id} has no image coordinates")
        entries.append((m.id, float(m.image_uv[0]), float(m.image_uv[1])))

    if wall is Wall.FRONT:
        (a, ua, _), (b, ub, _) = entries
        if ua == ub:
            raise AmbiguousOrdering("front wall markers tie exactly on column")
        return [a, b] if ua < ub else [b, a]

    rows = sorted(entries, key=lambda e: e[2])
    if rows[0][2] == rows[1][2]:
        raise AmbiguousOrdering("two back wall markers tie exactly on row")
    top = rows[0]
    rest = rows[1:]
    if rest[0][1] == rest[1][1]:
        raise AmbiguousOrdering("left/right markers tie exactly on column")
    rest.sort(key=lambda e: e[1])
    return [top[0], rest[0][0], rest[1][0]]


def identify_markers(
    detections: Sequence[tuple[tuple[float, float], Point3]], wall: Wall
) -> MarkerSet:
    """Assign wall role ids to anonymous (uv, position) detections.

    The roles follow the same raster rules as :func:`order_markers`; the
    returned set is ordered-consistent with it by construction.
    """
    expected = WALL_MARKER_IDS[wall]
    if len(detections) != len(expected):
        raise WrongMarkerCount(
            f"{wall.value} wall needs {len(expected)} detections, got {len(detections)}"
        )
    # Tag detections with provisional ids drawn from the wall's id pool, order
    # them geometrically, then bind roles in that order.
    provisional = MarkerSet(
        [
            Marker(expected[i], pos, uv)
            for i, (uv, pos) in enumerate(detections)
        ],
        wall=None,
    )
    ordered = order_markers(provisional, wall)
    markers = [
        Marker(role, provisional[pid].position, provisional[pid].image_uv)
        for role, pid in zip(expected, ordered)
    ]
    return MarkerSet(markers, wall=wall)
