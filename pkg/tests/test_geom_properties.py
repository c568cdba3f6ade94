"""Property tests for the geometry kernels."""

import math

import numpy as np
from hypothesis import given, settings, strategies as st

from boxlift.geom import (
    Box2D,
    Box3D,
    CameraModel,
    bev_iou,
    fit_min_box,
    iou_2d,
    iou_3d,
    points_in_box,
    project_box3d,
    project_point,
)

finite = st.floats(allow_nan=False, allow_infinity=False)
coord = st.floats(min_value=-30.0, max_value=30.0, allow_nan=False)
extent = st.floats(min_value=0.2, max_value=10.0, allow_nan=False)
angle = st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False, exclude_max=True)


@st.composite
def boxes3d(draw):
    center = (draw(coord), draw(coord), draw(st.floats(min_value=-3, max_value=3)))
    size = (draw(extent), draw(extent), draw(extent))
    return Box3D(center, size, draw(angle))


@st.composite
def boxes2d(draw):
    u0 = draw(st.floats(min_value=0, max_value=90))
    v0 = draw(st.floats(min_value=0, max_value=90))
    return Box2D(u0, v0, u0 + draw(st.floats(min_value=0.5, max_value=50)),
                 v0 + draw(st.floats(min_value=0.5, max_value=50)))


@settings(max_examples=60, deadline=None)
@given(boxes3d(), boxes3d())
def test_iou3d_symmetric_and_bounded(a, b):
    ab = iou_3d(a, b)
    assert 0.0 <= ab <= 1.0
    assert ab == iou_3d(b, a)


@settings(max_examples=60, deadline=None)
@given(boxes3d(), boxes3d())
def test_bev_iou_symmetric_and_bounded(a, b):
    ab = bev_iou(a, b)
    assert 0.0 <= ab <= 1.0
    assert ab == bev_iou(b, a)


@settings(max_examples=60, deadline=None)
@given(boxes3d())
def test_identity_iou(box):
    assert iou_3d(box, box) > 1 - 1e-9
    assert bev_iou(box, box) > 1 - 1e-9


@settings(max_examples=60, deadline=None)
@given(boxes2d(), boxes2d())
def test_iou2d_symmetric_bounded_identity(a, b):
    ab = iou_2d(a, b)
    assert 0.0 <= ab <= 1.0
    assert ab == iou_2d(b, a)
    assert iou_2d(a, a) == 1.0


@settings(max_examples=60, deadline=None)
@given(boxes3d(), boxes3d(), coord, coord, angle)
def test_bev_iou_rigid_invariance(a, b, tx, ty, theta):
    base = bev_iou(a, b)

    def move(box):
        c, s = math.cos(theta), math.sin(theta)
        x, y, z = box.center
        return Box3D(
            (c * x - s * y + tx, s * x + c * y + ty, z), box.size, box.yaw + theta
        )

    assert abs(bev_iou(move(a), move(b)) - base) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(min_value=-10, max_value=10),
            st.floats(min_value=-10, max_value=10),
            st.floats(min_value=-2, max_value=2),
        ),
        min_size=1,
        max_size=60,
    )
)
def test_fit_contains_all_points(raw_points):
    pts = np.array(raw_points, dtype=float)
    box = fit_min_box(pts)
    assert points_in_box(box, pts).size == pts.shape[0]


@settings(max_examples=40, deadline=None)
@given(boxes3d())
def test_projection_envelope_contains_corner_projections(box):
    cam = CameraModel(
        np.array([[120.0, 0, 80], [0, 120.0, 60], [0, 0, 1]]),
        np.eye(3),
        np.array([0.0, 0.0, 40.0]),
        160,
        120,
    )
    env = project_box3d(cam, box)
    for corner in box.corners():
        hit = project_point(cam, corner)
        if hit is None:
            continue
        u, v, _ = hit
        assert env is not None
        assert env.min_u - 1e-9 <= u <= env.max_u + 1e-9
        assert env.min_v - 1e-9 <= v <= env.max_v + 1e-9
