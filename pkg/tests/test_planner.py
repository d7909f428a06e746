import math

import numpy as np
import pytest

from suturesim.core import MarkerId, Point3, PointCloud, Pose, Wall, unit
from suturesim.planner import (
    Box,
    CollisionPolicy,
    DegenerateGeometry,
    DeformationPolicy,
    MarkerSetMismatch,
    MarkersMissing,
    PlanMode,
    PlanParameters,
    StitchKind,
    SuturePlan,
    check_deformation,
    generate_plans,
    predict_collision,
    prefilter,
    tool_frame_axes,
)
from suturesim.tissue import TissueState, capture_cloud


def _default_capture(noise=0.0, rng=None):
    state = TissueState()
    cloud = capture_cloud(state, noise_sigma_mm=noise, rng=rng)
    markers = {
        Wall.BACK: [
            state.marker_position(MarkerId.TOP),
            state.marker_position(MarkerId.LEFT),
            state.marker_position(MarkerId.RIGHT),
        ],
        Wall.FRONT: [
            state.marker_position(MarkerId.FRONT_LEFT),
            state.marker_position(MarkerId.FRONT_RIGHT),
        ],
    }
    return state, cloud, markers


def _spacings(points):
    return [
        math.dist(
            (a.position.x, a.position.y, a.position.z),
            (b.position.x, b.position.y, b.position.z),
        )
        for a, b in zip(points, points[1:])
    ]


def test_uniform_plan_on_noise_free_straight_edge():
    # Front wall: a straight 30 mm edge between two markers with S = 3 gives
    # 11 points at arclengths 0, 3, ..., 30.
    _, cloud, markers = _default_capture()
    uniform, _ = generate_plans(cloud, markers, PlanParameters())
    front = uniform.wall_points(Wall.FRONT)
    assert len(front) == 11
    for s in _spacings(front):
        assert s == pytest.approx(3.0, abs=1e-9)


def test_uniform_back_wall_lands_on_corner():
    _, cloud, markers = _default_capture()
    uniform, _ = generate_plans(cloud, markers, PlanParameters())
    back = uniform.wall_points(Wall.BACK)
    # 9 mm leg (4 points) + 30 mm run sharing the corner point (10 more).
    assert len(back) == 14
    for s in _spacings(back):
        assert s == pytest.approx(3.0, abs=1e-9)


def test_corner_reinforced_inserts_one_extra_per_corner():
    _, cloud, markers = _default_capture()
    uniform, corner = generate_plans(cloud, markers, PlanParameters())
    # Front wall: 2 corners -> 13 points; back wall: 3 corners -> 17 points.
    assert len(corner.wall_points(Wall.FRONT)) == len(uniform.wall_points(Wall.FRONT)) + 2
    assert len(corner.wall_points(Wall.BACK)) == len(uniform.wall_points(Wall.BACK)) + 3
    front = corner.wall_points(Wall.FRONT)
    ss = _spacings(front)
    assert ss[0] == pytest.approx(1.5, abs=1e-9)
    assert ss[1] == pytest.approx(1.5, abs=1e-9)
    assert ss[-1] == pytest.approx(1.5, abs=1e-9)
    kinds = [p.kind for p in front]
    assert kinds.count(StitchKind.CORNER) == 2


def test_exactly_one_knot_per_wall_leading():
    _, cloud, markers = _default_capture()
    uniform, corner = generate_plans(cloud, markers, PlanParameters())
    for plan in (uniform, corner):
        for wall in Wall:
            pts = plan.wall_points(wall)
            assert pts[0].kind is StitchKind.KNOT
            assert sum(1 for p in pts if p.kind is StitchKind.KNOT) == 1
        assert [p.index for p in plan.points] == list(range(len(plan.points)))


def test_generate_plans_deterministic():
    _, cloud, markers = _default_capture()
    a, _ = generate_plans(cloud, markers, PlanParameters())
    b, _ = generate_plans(cloud, markers, PlanParameters())
    assert a.to_dict() == b.to_dict()


def test_plan_points_inset_by_bite_depth_from_edge():
    state, cloud, markers = _default_capture()
    uniform, _ = generate_plans(cloud, markers, PlanParameters())
    for wall in Wall:
        edge = state.edge_polyline_world(wall)
        from suturesim.planner import polyline_min_distance

        for p in uniform.wall_points(wall):
            d = polyline_min_distance(p.position.as_array(), edge)
            assert d == pytest.approx(3.0, abs=1e-6)


def test_degenerate_markers_too_close():
    _, cloud, _ = _default_capture()
    markers = {
        Wall.BACK: [Point3(-18, 0, 9), Point3(-18, 0, -3), Point3(15, 0, -3)],
        Wall.FRONT: [Point3(-2, 3, -6), Point3(2, 3, -6)],  # 4 mm < 2 * 3 mm
    }
    with pytest.raises(DegenerateGeometry):
        generate_plans(cloud, markers, PlanParameters())


def test_markers_missing():
    _, cloud, markers = _default_capture()
    with pytest.raises(MarkersMissing):
        generate_plans(cloud, {Wall.BACK: markers[Wall.BACK]}, PlanParameters())


def test_plan_round_trips_through_dict():
    _, cloud, markers = _default_capture()
    uniform, _ = generate_plans(cloud, markers, PlanParameters())
    again = SuturePlan.from_dict(uniform.to_dict())
    assert again == uniform


# -- prefilter ---------------------------------------------------------------------


def test_prefilter_fixed_point_on_clean_plan():
    _, cloud, markers = _default_capture()
    uniform, _ = generate_plans(cloud, markers, PlanParameters())
    result = prefilter(uniform, cloud)
    assert not result.rejected
    for a, b in zip(result.plan.points, uniform.points):
        assert math.dist(
            (a.position.x, a.position.y, a.position.z),
            (b.position.x, b.position.y, b.position.z),
        ) < 1e-6


def test_prefilter_rejects_single_outlier():
    _, cloud, markers = _default_capture()
    uniform, _ = generate_plans(cloud, markers, PlanParameters())
    pts = list(uniform.points)
    import dataclasses

    victim = pts[5]
    pts[5] = dataclasses.replace(
        victim, position=Point3(victim.position.x, victim.position.y + 3.0, victim.position.z)
    )
    bumped = dataclasses.replace(uniform, points=tuple(pts))
    result = prefilter(bumped, cloud)
    assert result.rejected
    assert result.reason == "noisy"


def test_prefilter_accepts_scenario_noise():
    rng = np.random.default_rng(5)
    _, cloud, markers = _default_capture(noise=0.2, rng=rng)
    uniform, _ = generate_plans(cloud, markers, PlanParameters())
    result = prefilter(uniform, cloud)
    assert not result.rejected
    assert result.max_deviation_mm < 1.0


def test_prefilter_rejects_normal_flip():
    _, cloud, markers = _default_capture()
    uniform, _ = generate_plans(cloud, markers, PlanParameters())
    import dataclasses

    pts = list(uniform.points)
    n = pts[3].normal
    pts[3] = dataclasses.replace(pts[3], normal=(-n[0], -n[1], -n[2]))
    flipped = dataclasses.replace(uniform, points=tuple(pts))
    result = prefilter(flipped, cloud)
    assert result.rejected
    assert result.reason == "normal_flip"


# -- collision prediction ---------------------------------------------------------------


def brute_force_counts(cloud_pts, origin, direction, policy):
    """Voxel-membership oracle: per-point scalar membership checks in the
    tool frame, written independently of the vectorized implementation."""
    z = np.asarray(direction, dtype=float)
    z = z / math.sqrt(float(z @ z))
    ref = np.array([0.0, 0.0, 1.0])
    if abs(float(z @ ref)) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    x = np.cross(ref, z)
    x = x / math.sqrt(float(x @ x))
    y = np.cross(z, x)
    colliding = fitting = 0
    for p in cloud_pts:
        rel = p - origin
        cx = float(rel @ x)
        cy = float(rel @ y)
        cz = float(rel @ z)
        b = policy.tool_body_box
        if b.lo[0] <= cx <= b.hi[0] and b.lo[1] <= cy <= b.hi[1] and b.lo[2] <= cz <= b.hi[2]:
            colliding += 1
        j = policy.jaw_capture_box
        if j.lo[0] <= cx <= j.hi[0] and j.lo[1] <= cy <= j.hi[1] and j.lo[2] <= cz <= j.hi[2]:
            fitting += 1
    return colliding, fitting


def test_collision_matches_brute_force_oracle():
    rng = np.random.default_rng(77)
    policy = CollisionPolicy()
    for trial in range(100):
        n = int(rng.integers(50, 1000))
        pts = rng.uniform(-30, 30, size=(n, 3))
        cloud = PointCloud(points=pts, frame_id=trial + 1)
        origin = rng.uniform(-10, 10, size=3)
        direction = unit(rng.normal(size=3))
        pose = Pose(position=Point3.from_array(origin), direction=direction)
        verdict = predict_collision(Point3.from_array(origin), pose, cloud, policy)
        oc, of_ = brute_force_counts(pts, origin, np.asarray(direction), policy)
        assert verdict.colliding == oc
        assert verdict.fitting == of_


def _verdict_for_counts(colliding, fitting):
    # Geometry that puts exact point counts in each box: jaw spans z in
    # [-3, 3], body z in [-60, -3]; place points on the tool axis.
    pts = []
    for i in range(fitting):
        pts.append([0.0, 0.0, 0.1 + 0.001 * i])
    for i in range(colliding):
        pts.append([0.0, 0.0, -10.0 - 0.01 * i])
    cloud = PointCloud(points=np.array(pts), frame_id=1)
    pose = Pose(position=Point3(0, 0, 0), direction=(0.0, 0.0, 1.0))
    return predict_collision(Point3(0, 0, 0), pose, cloud, CollisionPolicy())


def test_collision_ratio_zero_usable():
    v = _verdict_for_counts(colliding=0, fitting=10)
    assert v.usable and v.ratio == 0.0


def test_collision_ratio_above_threshold_warns():
    v = _verdict_for_counts(colliding=9, fitting=10)
    assert not v.usable
    assert v.ratio == pytest.approx(0.9)


def test_collision_ratio_exact_boundary_is_usable():
    # "Exceeds" is strict: 8/10 = 0.8 does not warn.
    v = _verdict_for_counts(colliding=8, fitting=10)
    assert v.usable
    assert v.ratio == pytest.approx(0.8)


def test_collision_empty_jaw_warns():
    v = _verdict_for_counts(colliding=3, fitting=0)
    assert not v.usable
    assert v.reason == "empty_jaw"


def test_tool_frame_is_orthonormal():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = rng.normal(size=3)
        d = d / np.linalg.norm(d)
        x, y, z = tool_frame_axes(d)
        eye = np.stack([x, y, z]) @ np.stack([x, y, z]).T
        assert np.allclose(eye, np.eye(3), atol=1e-12)
        assert np.allclose(np.cross(x, y), z, atol=1e-12)


# -- deformation check ---------------------------------------------------------------


def _marker_map(offsets):
    base = {
        MarkerId.TOP: Point3(-18, 0, 9),
        MarkerId.LEFT: Point3(-18, 0, -3),
        MarkerId.RIGHT: Point3(15, 0, -3),
    }
    moved = {
        mid: Point3(p.x + offsets.get(mid, (0, 0, 0))[0],
                    p.y + offsets.get(mid, (0, 0, 0))[1],
                    p.z + offsets.get(mid, (0, 0, 0))[2])
        for mid, p in base.items()
    }
    return base, moved


def test_check_deformation_identity():
    base, same = _marker_map({})
    v = check_deformation(base, same)
    assert not v.replan_recommended
    assert v.max_displacement_mm == 0.0


def test_check_deformation_threshold_rule():
    base, moved = _marker_map({MarkerId.LEFT: (0, 0, 3.1)})
    v = check_deformation(base, moved)
    assert v.replan_recommended
    assert v.max_displacement_mm == pytest.approx(3.1)


def test_check_deformation_boundary_is_strict():
    for d, expect in ((2.9, False), (3.0, False), (3.1, True)):
        base, moved = _marker_map({MarkerId.TOP: (d, 0, 0)})
        v = check_deformation(base, moved)
        assert v.replan_recommended is expect


def test_check_deformation_mismatch():
    base, _ = _marker_map({})
    partial = {MarkerId.TOP: base[MarkerId.TOP]}
    with pytest.raises(MarkerSetMismatch):
        check_deformation(base, partial)


def test_check_deformation_translation_invariant():
    rng = np.random.default_rng(9)
    base, moved = _marker_map({MarkerId.RIGHT: (2, 2, 1)})
    v0 = check_deformation(base, moved)
    shift = rng.uniform(-100, 100, size=3)
    base2 = {m: p.translated(shift) for m, p in base.items()}
    moved2 = {m: p.translated(shift) for m, p in moved.items()}
    v1 = check_deformation(base2, moved2)
    assert v0.replan_recommended == v1.replan_recommended
    assert v0.max_displacement_mm == pytest.approx(v1.max_displacement_mm)
