import math

import numpy as np
import pytest

from suturesim.core import (
    AmbiguousOrdering,
    Marker,
    MarkerId,
    MarkerSet,
    Point3,
    PointCloud,
    Pose,
    GeometryError,
    Wall,
    WrongMarkerCount,
    distance,
    identify_markers,
    order_markers,
)


def test_distance_identity():
    assert distance(Point3(0, 0, 0), Point3(0, 0, 0)) == 0.0


def test_distance_axis_aligned():
    assert distance(Point3(3, 0, 0), Point3(0, 0, 0)) == 3.0


def test_distance_hand_evaluated():
    # sqrt(1 + 4 + 4) = 3
    assert distance(Point3(1, 2, 2), Point3(0, 0, 0)) == pytest.approx(3.0)


def test_distance_symmetric_and_triangle_inequality():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a, b, c = (Point3(*rng.uniform(-50, 50, size=3)) for _ in range(3))
        assert distance(a, b) == pytest.approx(distance(b, a))
        assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-9


def test_point_rejects_non_finite():
    with pytest.raises(GeometryError):
        Point3(float("nan"), 0, 0)
    with pytest.raises(GeometryError):
        Point3(0, float("inf"), 0)


def test_pose_requires_unit_direction():
    Pose(Point3(0, 0, 0), (0.0, 1.0, 0.0))
    with pytest.raises(GeometryError):
        Pose(Point3(0, 0, 0), (0.0, 2.0, 0.0))


def test_point_cloud_validation():
    with pytest.raises(GeometryError):
        PointCloud(points=np.zeros((0, 3)), frame_id=1)
    with pytest.raises(GeometryError):
        PointCloud(points=np.array([[1.0, np.nan, 0.0]]), frame_id=1)
    pc = PointCloud(points=np.zeros((5, 3)), frame_id=2)
    assert len(pc) == 5


def _back_set(uvs):
    ids = [MarkerId.TOP, MarkerId.LEFT, MarkerId.RIGHT]
    return MarkerSet(
        [Marker(i, Point3(0, 0, 0), uv) for i, uv in zip(ids, uvs)], wall=None
    )


def test_order_markers_back_wall():
    # uv = (column, row); (50,10) is topmost, then column decides left/right.
    ms = _back_set([(50, 10), (20, 80), (80, 80)])
    order = order_markers(ms, Wall.BACK)
    assert order == [MarkerId.TOP, MarkerId.LEFT, MarkerId.RIGHT]


def test_order_markers_front_wall():
    ms = MarkerSet(
        [
            Marker(MarkerId.FRONT_LEFT, Point3(0, 0, 0), (20, 60)),
            Marker(MarkerId.FRONT_RIGHT, Point3(0, 0, 0), (90, 60)),
        ]
    )
    assert order_markers(ms, Wall.FRONT) == [MarkerId.FRONT_LEFT, MarkerId.FRONT_RIGHT]


def test_order_markers_wrong_count():
    ms = MarkerSet(
        [
            Marker(MarkerId.TOP, Point3(0, 0, 0), (0, 0)),
            Marker(MarkerId.LEFT, Point3(0, 0, 0), (5, 5)),
        ]
    )
    with pytest.raises(WrongMarkerCount):
        order_markers(ms, Wall.BACK)


def test_order_markers_ambiguous_tie():
    with pytest.raises(AmbiguousOrdering):
        order_markers(_back_set([(50, 10), (20, 10), (80, 80)]), Wall.BACK)
    with pytest.raises(AmbiguousOrdering):
        order_markers(_back_set([(50, 10), (20, 80), (20, 80)]), Wall.BACK)


def test_order_markers_permutation_invariant():
    rng = np.random.default_rng(3)
    uvs = [(50.0, 10.0), (20.0, 80.0), (80.0, 80.0)]
    base = order_markers(_back_set(uvs), Wall.BACK)
    for _ in range(10):
        perm = list(rng.permutation(3))
        ids = [MarkerId.TOP, MarkerId.LEFT, MarkerId.RIGHT]
        shuffled = MarkerSet(
            [Marker(ids[i], Point3(0, 0, 0), uvs[i]) for i in perm]
        )
        assert order_markers(shuffled, Wall.BACK) == base


def test_identify_markers_assigns_roles_by_geometry():
    detections = [
        ((80.0, 80.0), Point3(15, 0, -3)),
        ((50.0, 10.0), Point3(-18, 0, 9)),
        ((20.0, 80.0), Point3(-18, 0, -3)),
    ]
    ms = identify_markers(detections, Wall.BACK)
    assert ms[MarkerId.TOP].position == Point3(-18, 0, 9)
    assert ms[MarkerId.LEFT].position == Point3(-18, 0, -3)
    assert ms[MarkerId.RIGHT].position == Point3(15, 0, -3)


def test_marker_set_wall_membership_enforced():
    with pytest.raises(WrongMarkerCount):
        MarkerSet(
            [Marker(MarkerId.TOP, Point3(0, 0, 0))], wall=Wall.BACK
        )
    with pytest.raises(GeometryError):
        MarkerSet(
            [
                Marker(MarkerId.TOP, Point3(0, 0, 0)),
                Marker(MarkerId.TOP, Point3(1, 1, 1)),
            ]
        )
