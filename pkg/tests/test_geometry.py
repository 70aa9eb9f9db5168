import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavectl.geometry import Disc, Ellipse, Polygon, Union, boundary_gap, rectangle, shape_from_dict


def test_disc_signed_distance_is_radial():
    d = Disc((0.5, -0.2), 0.7)
    x = np.array([0.5, 1.5, 0.5])
    y = np.array([-0.2, -0.2, 0.8])
    np.testing.assert_allclose(d.signed_distance(x, y), [-0.7, 0.3, 0.3], atol=1e-14)


def test_polygon_orientation_and_normals():
    # clockwise input is reoriented; normals point outward
    sq = Polygon([(0, 0), (0, 1), (1, 1), (1, 0)])
    for seg in sq.segments():
        mid = seg.point(0.5 * seg.length)
        out = mid + 1e-3 * seg.normal
        assert not sq.contains(out[0], out[1])
    assert sq.contains(0.5, 0.5)
    assert sq.interior_angles() == pytest.approx([0.5 * math.pi] * 4)


def test_self_intersecting_polygon_rejected():
    with pytest.raises(ValueError):
        Polygon([(0, 0), (1, 1), (1, 0), (0, 1)])


def test_rectangle_corners_and_projection():
    r = rectangle((0.0, 0.0), 2.0, 1.0)
    c = r.corners()
    assert len(c) == 4
    seg, s, dist, nx, ny = r.project(np.array([1.3]), np.array([0.1]))
    assert dist[0] == pytest.approx(0.3)
    assert (nx[0], ny[0]) == pytest.approx((1.0, 0.0))


def test_ellipse_contains_and_distance():
    e = Ellipse((0, 0), (2.0, 1.0), angle=0.0)
    assert e.contains(1.9, 0.0) and not e.contains(0.0, 1.1)
    assert e.signed_distance(np.array([3.0]), np.array([0.0]))[0] == pytest.approx(1.0, abs=1e-4)
    assert e.signed_distance(np.array([0.0]), np.array([0.0]))[0] == pytest.approx(-1.0, abs=1e-4)


def test_ray_hits_disc_with_outward_normal():
    d = Disc((0, 0), 1.0)
    t, n = d.first_hit(np.array([-3.0, 0.0]), np.array([1.0, 0.0]))
    assert t == pytest.approx(2.0)
    assert n == pytest.approx([-1.0, 0.0])


def test_union_and_gap():
    u = Union([Disc((-1, 0), 0.5), Disc((1, 0), 0.5)])
    assert u.contains(-1, 0) and u.contains(1, 0) and not u.contains(0, 0)
    gap, inside = boundary_gap(Disc((0, 0), 2.0), Disc((0, 0), 1.0))
    assert inside and gap == pytest.approx(1.0, abs=1e-6)


def test_shape_from_dict_kinds():
    assert isinstance(shape_from_dict({"kind": "disc", "center": [0, 0], "radius": 1}), Disc)
    e = shape_from_dict({"kind": "ellipse", "center": [0, 0], "semi_axes": [2, 1], "angle_deg": 30})
    assert isinstance(e, Ellipse)
    with pytest.raises((KeyError, ValueError)):
        shape_from_dict({"kind": "blob"})


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_signed_distance_sign_matches_contains(x, y):
    shapes = [Disc((0.2, 0.1), 1.1), rectangle((0, 0), 2.0, 1.2), Ellipse((0, 0), (1.5, 0.7), 0.4)]
    for s in shapes:
        sd = float(s.signed_distance(np.array([x]), np.array([y]))[0])
        if abs(sd) > 1e-6:
            assert (sd < 0) == bool(s.contains(x, y))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * math.pi))
def test_distance_is_one_lipschitz(theta):
    s = rectangle((0.3, 0), 1.0, 2.0)
    p = np.array([1.5 * math.cos(theta), 1.5 * math.sin(theta)])
    q = p + 0.05 * np.array([math.sin(theta), -math.cos(theta)])
    dp = s.signed_distance(p[:1], p[1:])[0]
    dq = s.signed_distance(q[:1], q[1:])[0]
    assert abs(dp - dq) <= 0.05 + 1e-12
