import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavectl.errors import UnsupportedVariableMetric
from wavectl.rays import (EVENT_TYPES, RAY_COLUMNS, Ray, TotalInternalReflection, escape_time_survey, snell_refract,
                          split_weights, trace, write_rays_csv, zone_speeds)
from wavectl.scenario import load_scenario


def test_snell_examples():
    assert snell_refract(0.0, 1.6, 1.3) == 0.0
    assert snell_refract(math.radians(30), 1.0, 1.0) == pytest.approx(math.radians(30), abs=1e-15)
    # 1.5 sin 60 deg = 1.299 > 1
    assert snell_refract(math.radians(60), 1.0, 1.5) is TotalInternalReflection
    assert not TotalInternalReflection
    with pytest.raises(ValueError):
        snell_refract(math.pi / 2, 1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1.5), st.floats(0.2, 5), st.floats(0.2, 5))
def test_snell_preserves_tangential_slowness(theta, ci, ct):
    out = snell_refract(theta, ci, ct)
    if out is TotalInternalReflection:
        assert (ct / ci) * math.sin(theta) > 1
    else:
        assert abs(math.sin(theta) / ci - math.sin(out) / ct) <= 1e-12 * max(1.0, 1 / ci)


@pytest.mark.parametrize("rule", ["equal", "acoustic"])
def test_split_weights_conserve(rule):
    for th in np.linspace(0, 1.2, 7):
        tt = snell_refract(th, 1.3, 1.6)
        if tt is TotalInternalReflection:
            continue
        wr, wt = split_weights(th, tt, 1.3, 1.6, rule)
        assert wr >= 0 and wt >= 0 and wr + wt == pytest.approx(1.0, abs=1e-15)


def test_free_space_ray_escapes_at_a():
    sc = load_scenario("free_space")
    lay = sc.layout
    ev, oc = trace(Ray.launch(lay, 0.0, 0.0, 0.3), lay, sc.coeffs, 10.0)
    assert [e.event_type for e in ev] == ["launch", "escape"]
    assert oc[0].kind == "escaped"
    assert oc[0].t == pytest.approx(lay.measurement_radius, abs=1e-12)


def test_two_disc_axis_ray_is_trapped():
    sc = load_scenario("two_disc")
    lay = sc.layout
    ev, oc = trace(Ray.launch(lay, 0.0, 0.0, 0.0), lay, sc.coeffs, 20.0)
    assert len(oc) == 1 and oc[0].kind == "trapped"
    assert sum(e.event_type == "reflect" for e in ev) >= 20
    rep = escape_time_survey(lay, sc.coeffs, 0, t_max=20.0, probes=sc.rays.probes)
    assert not rep.nontrapping_consistent
    assert 0 in rep.trapped_census


def test_convex_survey_within_chord_bound():
    sc = load_scenario("convex_obstacle")
    rep = escape_time_survey(sc.layout, sc.coeffs, 2000, seed=1)
    assert rep.nontrapping_consistent
    assert len(rep.escaped) == 2000
    assert rep.max_escape_time <= rep.chord_bound


def test_amplitude_bookkeeping():
    sc = load_scenario("fig4a")
    lay = sc.layout
    for rule in ("equal", "acoustic"):
        for ang in (0.2, 1.0, 2.5):
            _, oc = trace(Ray.launch(lay, 0.45, 0.1, ang), lay, sc.coeffs, 6.0, weights=rule)
            assert sum(o.amplitude for o in oc) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.35, 1.4), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi))
def test_traced_refractions_obey_snell(r, phi, ang):
    sc = load_scenario("fig4a")
    lay = sc.layout
    speeds = zone_speeds(lay, sc.coeffs)
    ev, _ = trace(Ray.launch(lay, r * math.cos(phi), r * math.sin(phi), ang), lay, sc.coeffs, 4.0, max_splits=4)
    for e in ev:
        if e.event_type != "refract":
            continue
        n = np.array(e.normal)
        p = np.array([e.x, e.y])
        other = int(lay.zone_of(*(p + 1e-7 * n)))
        d_in, d_out = np.array(e.incoming), np.array(e.outgoing)
        s_in = abs(d_in[0] * n[1] - d_in[1] * n[0]) / speeds[e.zone]
        s_out = abs(d_out[0] * n[1] - d_out[1] * n[0]) / speeds[other]
        assert abs(s_in - s_out) <= 1e-12


def test_splitless_path_is_reversible():
    sc = load_scenario("convex_obstacle")
    lay = sc.layout
    ev, oc = trace(Ray.launch(lay, -1.2, 0.1, 0.05), lay, sc.coeffs, 10.0)
    types = [e.event_type for e in ev]
    assert types == ["launch", "reflect", "escape"]
    end = ev[-1]
    # direction after the reflection, reversed
    p1, p2 = np.array([ev[1].x, ev[1].y]), np.array([end.x, end.y])
    d = p1 - p2
    back, _ = trace(Ray(p2 - 1e-9 * d / np.hypot(*d), d, 1), lay, sc.coeffs, 10.0)
    pts = np.array([[e.x, e.y] for e in back])
    assert [e.event_type for e in back] == ["launch", "reflect", "escape"]
    np.testing.assert_allclose(pts[1], p1, atol=1e-8)
    # exits where the forward ray was launched from, continued to the ball
    d0 = np.array([math.cos(0.05), math.sin(0.05)])
    off = pts[2] - np.array([-1.2, 0.1])
    assert abs(off[0] * d0[1] - off[1] * d0[0]) < 1e-8


def test_variable_metric_is_rejected():
    sc = load_scenario("fig1a")
    with pytest.raises(UnsupportedVariableMetric):
        escape_time_survey(sc.layout, sc.coeffs, 4)


def test_layered_census_is_negligible():
    sc = load_scenario("fig4a")
    rep = escape_time_survey(sc.layout, sc.coeffs, 256, seed=0)
    assert rep.census_fraction < 1e-3


def test_rays_csv(tmp_path):
    sc = load_scenario("two_disc")
    rep = escape_time_survey(sc.layout, sc.coeffs, 8, t_max=5.0, probes=sc.rays.probes)
    path = tmp_path / "rays.csv"
    write_rays_csv(path, rep)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == RAY_COLUMNS
    assert {r["event_type"] for r in rows} <= set(EVENT_TYPES)
    assert {int(r["ray_id"]) for r in rows} == set(range(10))
    d = rep.to_dict()
    assert d["n_rays"] == 10 and not d["nontrapping_consistent"]
