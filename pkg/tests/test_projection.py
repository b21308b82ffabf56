"""Tests for convex projections, tangent cones, and the membership test."""

import numpy as np
import pytest

from dirboot.core import EstimateBundle, GridFunction
from dirboot.projection import (
    Box,
    ConeSpec,
    HalfspaceIntersection,
    MonotoneCone,
    NonpositiveOrthant,
    ProjectionError,
    derivative_sup_estimate,
    distance_statistic,
    isotonic_fit,
    project,
    project_tangent,
    run_projection_test,
    tangent_cone,
)

from oracles import monotone_projection_bruteforce


def weighted_norm(v, w):
    return float(np.sqrt(np.sum(w * np.asarray(v) ** 2)))


def test_isotonic_fit_known_values_and_bruteforce():
    assert np.allclose(isotonic_fit([3.0, 1.0, 2.0]), [2.0, 2.0, 2.0])
    assert np.allclose(isotonic_fit([1.0, 3.0, 2.0]), [1.0, 2.5, 2.5])
    sorted_in = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(isotonic_fit(sorted_in), sorted_in)
    assert isotonic_fit([5.0]) == pytest.approx([5.0])
    # heavier weight pins the pooled value toward its coordinate
    got = isotonic_fit([2.0, 0.0], weights=[3.0, 1.0])
    assert np.allclose(got, [1.5, 1.5])

    rng = np.random.default_rng(42)
    for trial in range(80):
        d = int(rng.integers(1, 9))
        y = rng.normal(size=d) * rng.uniform(0.5, 3.0)
        w = np.ones(d) if trial % 2 == 0 else rng.uniform(0.2, 3.0, size=d)
        got = isotonic_fit(y, w)
        want = monotone_projection_bruteforce(y, w)
        assert np.max(np.abs(got - want)) <= 1e-10
        assert np.all(np.diff(got) >= -1e-12)

    with pytest.raises(ValueError):
        isotonic_fit([1.0, 2.0], weights=[1.0])
    with pytest.raises(ValueError):
        isotonic_fit([1.0, 2.0], weights=[1.0, -1.0])


def test_project_orthant_and_box_clip_coordinatewise():
    v = np.array([1.5, -2.0, 0.0, 3.0])
    got = project(NonpositiveOrthant(4), v)
    assert np.array_equal(got, [0.0, -2.0, 0.0, 0.0])
    # idempotent and exact for feasible points
    assert np.array_equal(project(NonpositiveOrthant(4), got), got)

    box = Box(lower=[-1.0, -np.inf, 0.0], upper=[1.0, 0.0, 2.0])
    assert np.array_equal(project(box, np.array([5.0, -3.0, 1.0])),
                          [1.0, -3.0, 1.0])
    assert box.dim == 3

    # clipping is the exact projection in any diagonal weighted norm
    grid = np.array([0.1, 0.4, 0.9])
    f = GridFunction(grid, np.array([2.0, -1.0, 0.5]),
                     weights=np.array([5.0, 1.0, 0.1]))
    pf = project(NonpositiveOrthant(3), f)
    assert isinstance(pf, GridFunction)
    assert np.array_equal(pf.grid, grid)
    assert np.array_equal(pf.values, [0.0, -1.0, 0.0])

    with pytest.raises(ValueError):
        project(NonpositiveOrthant(3), np.zeros(4))
    with pytest.raises(ValueError):
        Box(lower=[1.0], upper=[0.0])
    with pytest.raises(ValueError):
        project(NonpositiveOrthant(3), np.zeros(3), tol=0.0)


def test_project_monotone_cone_uses_quadrature_weights():
    rng = np.random.default_rng(5)
    for _ in range(40):
        d = int(rng.integers(2, 8))
        grid = np.sort(rng.uniform(0.0, 1.0, size=d))
        grid += np.arange(d) * 1e-3  # enforce strict increase
        w = rng.uniform(0.2, 2.0, size=d)
        f = GridFunction(grid, rng.normal(size=d), w)
        pf = project(MonotoneCone(d), f)
        want = monotone_projection_bruteforce(f.values, w)
        assert np.max(np.abs(pf.values - want)) <= 1e-10


def test_projection_nonexpansive_and_moreau_orthogonal():
    rng = np.random.default_rng(9)
    for trial in range(120):
        d = int(rng.integers(1, 7))
        kind = trial % 3
        if kind == 0:
            cset = NonpositiveOrthant(d)
        elif kind == 1:
            lo = rng.normal(size=d) - 1.5
            cset = Box(lower=lo, upper=lo + rng.uniform(0.5, 2.0, size=d))
        else:
            cset = MonotoneCone(d)
        w = np.ones(d) if trial % 2 == 0 else rng.uniform(0.3, 2.5, size=d)
        grid = np.arange(d, dtype=float) if d > 1 else np.array([0.0])
        x = GridFunction(grid, rng.normal(size=d) * 2.0, w)
        y = GridFunction(grid, rng.normal(size=d) * 2.0, w)
        px = project(cset, x)
        py = project(cset, y)
        # nonexpansive in the weighted norm
        lhs = weighted_norm(px.values - py.values, w)
        rhs = weighted_norm(x.values - y.values, w)
        assert lhs <= rhs + 1e-10
        # Moreau: the residual makes an obtuse angle with any feasible move
        z = project(cset, GridFunction(grid, rng.normal(size=d) * 3.0, w))
        inner = float(np.sum(w * (x.values - px.values) * (z.values - px.values)))
        assert inner <= 1e-10
        # for cones the residual is orthogonal to the projection
        if kind in (0, 2):
            ortho = float(np.sum(w * (x.values - px.values) * px.values))
            assert abs(ortho) <= 1e-10 * max(1.0, weighted_norm(x.values, w) ** 2)


def test_dykstra_matches_closed_forms():
    rng = np.random.default_rng(33)
    for _ in range(25):
        d = int(rng.integers(1, 6))
        v = rng.normal(size=d) * 2.0
        w = rng.uniform(0.3, 2.0, size=d)
        grid = np.arange(d, dtype=float)
        point = GridFunction(grid, v, w) if d > 1 else v

        # orthant as halfspaces: normals = I, offsets = 0
        hs = HalfspaceIntersection(np.eye(d), np.zeros(d),
                                   feasible_point=-np.ones(d))
        got = project(hs, point)
        got_vals = got.values if isinstance(got, GridFunction) else got
        assert np.max(np.abs(got_vals - np.minimum(v, 0.0))) <= 1e-8

        # a single halfspace has an explicit weighted projection
        a = rng.normal(size=d)
        if np.linalg.norm(a) < 0.1:
            a = np.ones(d)
        b = float(rng.normal())
        feas = a * (b - 1.0) / float(a @ a)
        hs1 = HalfspaceIntersection(a[None, :], [b], feasible_point=feas)
        got = project(hs1, point)
        got_vals = got.values if isinstance(got, GridFunction) else got
        ww = w if isinstance(point, GridFunction) else np.ones(d)
        gap = float(a @ v) - b
        if gap > 0:
            want = v - gap / float(a @ (a / ww)) * (a / ww)
        else:
            want = v
        assert np.max(np.abs(got_vals - want)) <= 1e-8

    with pytest.raises(ValueError):
        HalfspaceIntersection(np.eye(2), np.zeros(2), feasible_point=[1.0, 1.0])
    with pytest.raises(ValueError):
        HalfspaceIntersection(np.zeros((1, 2)), [0.0], feasible_point=[0.0, 0.0])


def test_tangent_cone_activity_detection():
    cone = tangent_cone(NonpositiveOrthant(3), np.array([0.0, -2.0, -1e-9]),
                        activity_tol=1e-6)
    assert cone.active == (0, 2)

    box = Box(lower=[0.0, 0.0], upper=[1.0, 1.0])
    corner = tangent_cone(box, np.array([1.0, 0.0]), activity_tol=1e-8)
    assert corner.active == (0, 3)  # upper bound of x0, lower bound of x1

    flat = tangent_cone(MonotoneCone(4), np.array([0.0, 0.0, 1.0, 1.0]),
                        activity_tol=1e-8)
    assert flat.active == (0, 2)

    hs = HalfspaceIntersection([[1.0, 1.0]], [1.0], feasible_point=[0.0, 0.0])
    on_face = tangent_cone(hs, np.array([0.5, 0.5]), activity_tol=1e-8)
    assert on_face.active == (0,)
    off_face = tangent_cone(hs, np.array([0.0, 0.0]), activity_tol=1e-8)
    assert off_face.active == ()

    with pytest.raises(ValueError, match="project it onto the set first"):
        tangent_cone(NonpositiveOrthant(2), np.array([1.0, 1.0]),
                     activity_tol=1e-6)
    with pytest.raises(ValueError):
        tangent_cone(NonpositiveOrthant(2), np.zeros(2), activity_tol=0.0)
    with pytest.raises(ValueError):
        ConeSpec(NonpositiveOrthant(2), active=(5,))
    with pytest.raises(ValueError):
        ConeSpec(NonpositiveOrthant(2), active=(0, 0))


def test_project_tangent_clamps_only_active_directions():
    h = np.array([1.0, 1.0, -1.0])

    everywhere = ConeSpec(NonpositiveOrthant(3), active=())
    assert np.array_equal(project_tangent(everywhere, h), h)

    partial = ConeSpec(NonpositiveOrthant(3), active=(0,))
    assert np.array_equal(project_tangent(partial, h), [0.0, 1.0, -1.0])

    box = Box(lower=[0.0, 0.0], upper=[1.0, 1.0])
    at_corner = ConeSpec(box, active=(0, 3))
    got = project_tangent(at_corner, np.array([0.5, -0.5]))
    assert np.array_equal(got, [0.0, 0.0])  # cannot increase x0 nor decrease x1

    # tied span of a monotone cone: isotonic on the chain, identity elsewhere
    cone = ConeSpec(MonotoneCone(4), active=(0,))
    got = project_tangent(cone, np.array([2.0, 0.0, -5.0, 7.0]))
    assert np.allclose(got, [1.0, 1.0, -5.0, 7.0])

    # halfspace cone: single active normal has the explicit residual form
    hs = HalfspaceIntersection([[1.0, 1.0]], [1.0], feasible_point=[0.0, 0.0])
    cone = ConeSpec(hs, active=(0,))
    d = np.array([1.0, 0.0])
    got = project_tangent(cone, d)
    a = np.array([1.0, 1.0])
    want = d - max(0.0, float(a @ d)) / float(a @ a) * a
    assert np.max(np.abs(got - want)) <= 1e-8

    with pytest.raises(ValueError):
        project_tangent(cone, np.zeros(3))


def test_distance_statistic_scales_by_rate():
    grid = np.linspace(0.2, 0.8, 5)
    rising = GridFunction(grid, np.linspace(0.0, 1.0, 5))
    bundle = EstimateBundle(rising, sample_size=400)
    assert distance_statistic(bundle, MonotoneCone(5)) == 0.0

    rng = np.random.default_rng(17)
    for _ in range(20):
        vals = rng.normal(size=5)
        f = GridFunction(grid, vals)
        bundle = EstimateBundle(f, sample_size=400)
        want = monotone_projection_bruteforce(vals, f.weights)
        dist = weighted_norm(vals - want, f.weights)
        got = distance_statistic(bundle, MonotoneCone(5))
        assert abs(got - 20.0 * dist) <= 1e-10 * max(1.0, dist)


def test_derivative_sup_estimate_threshold_and_search():
    theta = np.array([-0.001, -5.0, 0.002])
    bundle = EstimateBundle(theta, sample_size=1000)
    h = np.array([1.0, 1.0, 1.0])

    # eps large enough to see both near-active coordinates
    got = derivative_sup_estimate(NonpositiveOrthant(3), bundle, 0.1, h,
                                  mode="threshold")
    assert got == pytest.approx(np.sqrt(2.0))
    got = derivative_sup_estimate(NonpositiveOrthant(3), bundle, 0.1, h,
                                  mode="sup-search")
    assert got == pytest.approx(np.sqrt(2.0))

    # positive homogeneity of the estimated derivative
    rng = np.random.default_rng(4)
    for _ in range(30):
        hh = rng.normal(size=3)
        c = float(rng.uniform(0.1, 10.0))
        base = derivative_sup_estimate(NonpositiveOrthant(3), bundle, 0.05, hh)
        scaled = derivative_sup_estimate(NonpositiveOrthant(3), bundle, 0.05,
                                         c * hh)
        assert abs(scaled - c * base) <= 1e-12 * max(1.0, c * base)

    # subadditivity: distance to a convex cone is sublinear
    for _ in range(30):
        h1 = rng.normal(size=4)
        h2 = rng.normal(size=4)
        bundle4 = EstimateBundle(np.array([0.0, -0.001, 0.001, 0.0]),
                                 sample_size=1000)
        for cset in (NonpositiveOrthant(4), MonotoneCone(4)):
            d1 = derivative_sup_estimate(cset, bundle4, 0.05, h1)
            d2 = derivative_sup_estimate(cset, bundle4, 0.05, h2)
            dsum = derivative_sup_estimate(cset, bundle4, 0.05, h1 + h2)
            assert dsum <= d1 + d2 + 1e-10

    # many marginally-active coordinates: the threshold cone activates all,
    # but their joint activation is too expensive for the search mode
    d = 6
    theta = np.full(d, -0.09)
    bundle = EstimateBundle(theta, sample_size=100)
    h = np.ones(d)
    thr = derivative_sup_estimate(NonpositiveOrthant(d), bundle, 0.1, h,
                                  mode="threshold")
    sup = derivative_sup_estimate(NonpositiveOrthant(d), bundle, 0.1, h,
                                  mode="sup-search")
    assert thr == pytest.approx(np.sqrt(d))
    assert sup == pytest.approx(1.0)  # only one coordinate affordable
    assert sup <= thr

    with pytest.raises(ValueError):
        derivative_sup_estimate(NonpositiveOrthant(3), bundle4, 0.0, h1)
    with pytest.raises(ValueError):
        derivative_sup_estimate(NonpositiveOrthant(d), bundle, 0.1, h,
                                mode="argmax")


def test_run_projection_test_end_to_end():
    rng = np.random.default_rng(123)

    def bundle_factory(data, weights):
        data = np.asarray(data, dtype=float)
        if weights is None:
            est = data.mean(axis=0)
        else:
            w = np.asarray(weights, dtype=float)
            est = (w @ data) / w.sum()
        return EstimateBundle(est, sample_size=data.shape[0])

    inside = rng.normal(size=(200, 2)) - 2.0
    report = run_projection_test(bundle_factory, inside, NonpositiveOrthant(2),
                                 alpha=0.05, B=200, master_seed=3)
    assert report.statistic == 0.0
    assert report.reject is False
    assert report.diagnostics["epsilon_n"] == pytest.approx(200.0 ** (-1 / 3))
    assert report.seed_manifest["epsilon_const"] == 1.0
    probe = report.diagnostics["derivative_mode_probe"]
    assert probe["max_abs_gap"] >= 0.0

    outside = rng.normal(size=(200, 2))
    outside[:, 0] += 3.0
    report = run_projection_test(bundle_factory, outside, NonpositiveOrthant(2),
                                 alpha=0.05, B=200, master_seed=3)
    assert report.statistic > 0.0
    assert report.reject is True

    # reports are reproducible under the same master seed
    again = run_projection_test(bundle_factory, outside, NonpositiveOrthant(2),
                                alpha=0.05, B=200, master_seed=3)
    assert again.statistic == report.statistic
    assert again.critical_value == report.critical_value
    assert again.p_value == report.p_value


def test_run_projection_test_monotone_curve():
    rng = np.random.default_rng(7)
    grid = np.array([0.25, 0.5, 0.75])
    mu = np.array([0.0, 0.5, 1.0])

    def bundle_factory(data, weights):
        data = np.asarray(data, dtype=float)
        if weights is None:
            est = data.mean(axis=0)
        else:
            w = np.asarray(weights, dtype=float)
            est = (w @ data) / w.sum()
        return EstimateBundle(GridFunction(grid, est), sample_size=data.shape[0])

    data = mu + rng.normal(size=(300, 3))
    report = run_projection_test(bundle_factory, data, MonotoneCone(3),
                                 alpha=0.1, B=100, master_seed=1)
    assert report.reject is False
    assert report.diagnostics["n_active"] >= 0
