"""Tests for the kinked-functional catalog and derivative estimators."""

import numpy as np
import pytest

from dirboot.core import EmpiricalLaw, EstimateBundle, GridFunction, law_distance
from dirboot.derivatives import (
    AbsMean,
    ConvexDistance,
    DerivativeTuning,
    MaxCoord,
    StochDomCvM,
    certificate_norm,
    estimate_derivative,
    eval_derivative,
    eval_functional,
    invariance_probe,
    local_limit_law_max,
    probe_table_to_csv,
)
from dirboot.projection import MonotoneCone, NonpositiveOrthant

from oracles import monotone_projection_bruteforce


def unit_weight_curve(k):
    return GridFunction(np.linspace(0.2, 0.8, k), np.ones(k))


def test_abs_mean_values_and_derivative():
    spec = AbsMean()
    assert eval_functional(spec, -0.5) == 0.5
    assert eval_functional(spec, np.array([2.0])) == 2.0
    # at the kink the derivative is the fold |h|; away it is the signed slope
    assert eval_derivative(spec, 0.0, -3.0) == 3.0
    assert eval_derivative(spec, 0.0, 2.0) == 2.0
    assert eval_derivative(spec, 1.5, -3.0) == -3.0
    assert eval_derivative(spec, -1.5, -3.0) == 3.0
    with pytest.raises(ValueError):
        eval_functional(spec, np.array([1.0, 2.0]))


def test_max_coord_values_and_derivative():
    spec = MaxCoord(dim=3)
    assert eval_functional(spec, [1.0, 3.0, 2.0]) == 3.0
    # unique argmax: the derivative reads that coordinate
    assert eval_derivative(spec, [1.0, 3.0, 2.0], [5.0, -1.0, 9.0]) == -1.0
    # tie: max over the tied coordinates
    assert eval_derivative(spec, [3.0, 3.0, 2.0], [5.0, -1.0, 9.0]) == 5.0
    assert eval_derivative(spec, [3.0, 3.0, 3.0], [5.0, -1.0, 9.0]) == 9.0
    with pytest.raises(ValueError):
        eval_functional(spec, [1.0, 2.0])
    with pytest.raises(ValueError):
        MaxCoord(dim=0)


def test_stoch_dom_values_and_derivative():
    w = unit_weight_curve(3)  # uniform knots 0.2, 0.5, 0.8 -> cells all 0.3
    spec = StochDomCvM(weight=w)
    assert spec.mass == pytest.approx(0.9)

    theta = np.array([[1.0, 0.0, -2.0], [0.0, 0.0, 0.0]])
    # positive part of the gap: 1.0 at the first knot only
    assert eval_functional(spec, theta) == pytest.approx(0.3)
    # flat (2T,) input means curve 1 stacked over curve 2
    assert eval_functional(spec, theta.ravel()) == pytest.approx(0.3)
    assert eval_functional(spec, (theta[0], theta[1])) == pytest.approx(0.3)

    h = np.array([[1.0, 1.0, 1.0], [0.0, 2.0, 0.0]])
    # above: passes the gap slope; boundary: folds it; below: drops it
    want = 0.3 * 1.0 + 0.3 * max(1.0 - 2.0, 0.0) + 0.0
    assert eval_derivative(spec, theta, h) == pytest.approx(want)

    with pytest.raises(ValueError):
        eval_functional(spec, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        StochDomCvM(weight=GridFunction([0.1, 0.9], [1.0, -1.0]))


def test_convex_distance_values_and_derivative():
    spec = ConvexDistance(NonpositiveOrthant(3))
    v = np.array([1.0, -2.0, 2.0])
    assert eval_functional(spec, v) == pytest.approx(np.sqrt(5.0))
    # smooth regime: gradient is the unit residual
    h = np.array([1.0, 1.0, 1.0])
    want = float(np.array([1.0, 0.0, 2.0]) @ h) / np.sqrt(5.0)
    assert eval_derivative(spec, v, h) == pytest.approx(want)
    # on the set at a kink: norm of the tangent-cone residual
    origin = np.zeros(3)
    assert eval_functional(spec, origin) == 0.0
    assert eval_derivative(spec, origin, h) == pytest.approx(np.sqrt(3.0))
    assert eval_derivative(spec, np.array([-5.0, 0.0, 0.0]), h) == pytest.approx(
        np.sqrt(2.0))

    # explicit-weights route
    wspec = ConvexDistance(NonpositiveOrthant(2), weights=np.array([4.0, 1.0]))
    assert eval_functional(wspec, np.array([1.0, 1.0])) == pytest.approx(np.sqrt(5.0))
    with pytest.raises(ValueError):
        eval_functional(wspec, np.array([1.0, 1.0, 1.0]))

    # GridFunction route uses quadrature weights
    grid = np.array([0.25, 0.5, 0.75])
    f = GridFunction(grid, np.array([0.5, -1.0, 0.2]))
    mono = ConvexDistance(MonotoneCone(3))
    proj = monotone_projection_bruteforce(f.values, f.weights)
    want = float(np.sqrt(np.sum(f.weights * (f.values - proj) ** 2)))
    assert eval_functional(mono, f) == pytest.approx(want)


def test_exact_derivatives_match_difference_quotients():
    rng = np.random.default_rng(42)
    steps = np.geomspace(1e-3, 1e-6, 7)
    w = unit_weight_curve(4)

    for trial in range(60):
        kind = trial % 4
        if kind == 0:
            spec = AbsMean()
            theta = float(rng.normal()) or 0.3
            h = float(rng.normal())
        elif kind == 1:
            spec = MaxCoord(dim=4)
            theta = rng.normal(size=4)
            theta[int(rng.integers(4))] += 1.0  # clear argmax margin
            h = rng.normal(size=4)
        elif kind == 2:
            spec = StochDomCvM(weight=w)
            theta = rng.normal(size=(2, 4))
            theta[0] += np.where(rng.uniform(size=4) < 0.5, 1.0, -1.0)
            h = rng.normal(size=(2, 4))
        else:
            # the distance functional is smooth but curved away from the set,
            # so keep the distance >= 1 and the direction unit-norm: the
            # second-order quotient error is then below t/2
            spec = ConvexDistance(NonpositiveOrthant(4))
            theta = rng.normal(size=4)
            theta[np.abs(theta) < 1.0] = 1.5
            h = rng.normal(size=4)
            h /= np.linalg.norm(h)
        d = eval_derivative(spec, theta, h)
        phi0 = eval_functional(spec, theta)
        for t in steps[-2:]:
            if kind == 0:
                shifted = theta + t * h
            elif kind in (1, 3):
                shifted = np.asarray(theta) + t * np.asarray(h)
            else:
                shifted = np.asarray(theta) + t * np.asarray(h)
            quotient = (eval_functional(spec, shifted) - phi0) / t
            assert abs(quotient - d) <= 1e-6 * max(1.0, abs(d))

    # exact at the kinks: these functionals are positively homogeneous there
    for t in steps:
        q = (eval_functional(AbsMean(), 0.0 + t * -2.0) - 0.0) / t
        assert q == eval_derivative(AbsMean(), 0.0, -2.0)
        spec = ConvexDistance(NonpositiveOrthant(2))
        h = np.array([1.5, -0.5])
        q = (eval_functional(spec, t * h) - 0.0) / t
        assert abs(q - eval_derivative(spec, np.zeros(2), h)) <= 1e-12


def test_tuning_defaults_follow_rate_rules():
    tuning = DerivativeTuning().resolved(1000)
    assert tuning.slack_tol == pytest.approx(0.1)
    assert tuning.contact_tol == pytest.approx(0.1)
    assert tuning.step == pytest.approx(1000.0 ** -0.25)
    pinned = DerivativeTuning(slack_tol=0.5).resolved(1000)
    assert pinned.slack_tol == 0.5
    assert pinned.contact_tol == pytest.approx(0.1)
    with pytest.raises(ValueError):
        DerivativeTuning(step=-1.0).validate()


def test_estimate_derivative_abs_mean_kink_window():
    # inside the n^(-1/3) window the estimator keeps the fold
    at_kink = EstimateBundle(np.array(0.05), sample_size=1000)
    est = estimate_derivative(AbsMean(), at_kink)
    assert est.detail["at_kink"] is True
    assert est(-2.0) == 2.0 and est(2.0) == 2.0
    assert est.lipschitz_bound == 1.0

    # outside it, the smooth signed slope
    away = EstimateBundle(np.array(-0.5), sample_size=1000)
    est = estimate_derivative(AbsMean(), away)
    assert est.detail["at_kink"] is False
    assert est(2.0) == -2.0

    with pytest.raises(ValueError):
        estimate_derivative(AbsMean(), away, mode="secant")


def test_estimate_derivative_max_coord_selection():
    n = 10_000  # slack n^(-1/3) ~ 0.0464
    theta = np.array([0.0, -0.01, -1.0])
    bundle = EstimateBundle(theta, sample_size=n)
    est = estimate_derivative(MaxCoord(3), bundle)
    assert list(est.detail["selected"]) == [0, 1]
    h = np.array([-5.0, 1.0, 100.0])
    assert est(h) == 1.0  # the far-behind coordinate is ignored

    clear = EstimateBundle(np.array([0.0, -1.0, -1.0]), sample_size=n)
    est = estimate_derivative(MaxCoord(3), clear)
    assert list(est.detail["selected"]) == [0]
    assert est(h) == -5.0


def test_estimate_derivative_stoch_dom_contact_sets():
    w = unit_weight_curve(4)
    spec = StochDomCvM(weight=w)
    n = 1000  # contact_tol 0.1
    pair = np.array([[0.5, 0.05, -0.05, -0.5], np.zeros(4)])
    bundle = EstimateBundle(pair, sample_size=n)
    est = estimate_derivative(spec, bundle)
    assert list(est.detail["strictly_above"]) == [True, False, False, False]
    assert list(est.detail["on_boundary"]) == [False, True, True, False]
    assert est.lipschitz_bound == pytest.approx(spec.mass)
    h = np.array([[1.0, -1.0, 1.0, 1.0], np.zeros(4)])
    # 0.2 cells scaled by unit weight: above passes -1? no: above knot passes
    # +1.0, boundary knots fold max(-1,0)=0 and max(1,0)=1, below drops
    cell = w.weights[0]
    assert est(h) == pytest.approx(cell * (1.0 + 0.0 + 1.0))


def test_estimate_derivative_convex_distance():
    bundle = EstimateBundle(np.array([-0.001, -5.0, 0.0]), sample_size=1000)
    est = estimate_derivative(ConvexDistance(NonpositiveOrthant(3)), bundle)
    assert est.detail["epsilon"] == pytest.approx(0.1)
    h = np.ones(3)
    assert est(h) == pytest.approx(np.sqrt(2.0))  # coords 0 and 2 are active


def test_derivative_estimates_positively_homogeneous():
    rng = np.random.default_rng(5)
    w = unit_weight_curve(4)
    specs_and_bundles = [
        (AbsMean(), EstimateBundle(np.array(0.01), sample_size=500)),
        (MaxCoord(4), EstimateBundle(rng.normal(size=4), sample_size=500)),
        (StochDomCvM(w), EstimateBundle(rng.normal(size=(2, 4)) * 0.05,
                                        sample_size=500)),
        (ConvexDistance(NonpositiveOrthant(4)),
         EstimateBundle(-np.abs(rng.normal(size=4)) * 0.05, sample_size=500)),
    ]
    for spec, bundle in specs_and_bundles:
        for mode_est in (estimate_derivative(spec, bundle),):
            for _ in range(60):
                if isinstance(spec, AbsMean):
                    h = float(rng.normal())
                elif isinstance(spec, StochDomCvM):
                    h = rng.normal(size=(2, 4))
                else:
                    h = rng.normal(size=4)
                c = float(rng.uniform(0.05, 20.0))
                base = mode_est(h)
                scaled = mode_est(c * h if not isinstance(h, float) else c * h)
                assert abs(scaled - c * base) <= 1e-12 * max(1.0, abs(c * base))


def test_derivative_estimates_subadditive():
    rng = np.random.default_rng(6)
    w = unit_weight_curve(4)
    specs_and_bundles = [
        (AbsMean(), EstimateBundle(np.array(0.0), sample_size=500)),
        (MaxCoord(4), EstimateBundle(np.array([0.0, -0.01, -0.02, -3.0]),
                                     sample_size=500)),
        (StochDomCvM(w), EstimateBundle(np.zeros((2, 4)), sample_size=500)),
        (ConvexDistance(NonpositiveOrthant(4)),
         EstimateBundle(np.zeros(4), sample_size=500)),
    ]
    for spec, bundle in specs_and_bundles:
        est = estimate_derivative(spec, bundle)
        for _ in range(60):
            if isinstance(spec, AbsMean):
                h1, h2 = float(rng.normal()), float(rng.normal())
            elif isinstance(spec, StochDomCvM):
                h1, h2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
            else:
                h1, h2 = rng.normal(size=4), rng.normal(size=4)
            assert est(h1 + h2) <= est(h1) + est(h2) + 1e-10


def test_lipschitz_certificates_hold():
    rng = np.random.default_rng(7)
    w = unit_weight_curve(3)
    specs_and_bundles = [
        (AbsMean(), EstimateBundle(np.array(0.02), sample_size=2000)),
        (MaxCoord(3), EstimateBundle(np.array([0.0, -0.01, -2.0]),
                                     sample_size=2000)),
        (StochDomCvM(w), EstimateBundle(rng.normal(size=(2, 3)) * 0.05,
                                        sample_size=2000)),
        (ConvexDistance(NonpositiveOrthant(3)),
         EstimateBundle(np.array([0.0, -0.03, -1.0]), sample_size=2000)),
    ]
    for spec, bundle in specs_and_bundles:
        est = estimate_derivative(spec, bundle)
        for _ in range(250):
            if isinstance(spec, AbsMean):
                h1, h2 = float(rng.normal()), float(rng.normal())
                delta = h1 - h2
            elif isinstance(spec, StochDomCvM):
                h1, h2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
                delta = h1 - h2
            else:
                h1, h2 = rng.normal(size=3), rng.normal(size=3)
                delta = h1 - h2
            gap = abs(est(h1) - est(h2))
            assert gap <= est.lipschitz_bound * certificate_norm(spec, delta) + 1e-10


def test_numerical_mode_agrees_with_plugin():
    rng = np.random.default_rng(8)
    w = unit_weight_curve(3)
    n = 4096  # step n^(-1/4) = 0.125
    specs_and_bundles = [
        (AbsMean(), EstimateBundle(np.array(1.0), sample_size=n)),
        (MaxCoord(3), EstimateBundle(np.array([1.0, 0.0, -1.0]), sample_size=n)),
        (StochDomCvM(w), EstimateBundle(np.array([[1.0, 1.0, 1.0], np.zeros(3)]),
                                        sample_size=n)),
        (ConvexDistance(NonpositiveOrthant(3)),
         EstimateBundle(np.array([2.0, -1.0, -2.0]), sample_size=n)),
    ]
    for spec, bundle in specs_and_bundles:
        plugin = estimate_derivative(spec, bundle)
        numerical = estimate_derivative(spec, bundle, mode="numerical")
        assert numerical.detail.get("numerical") is True
        step = numerical.tuning.step
        for _ in range(40):
            if isinstance(spec, AbsMean):
                h = float(rng.normal())
            elif isinstance(spec, StochDomCvM):
                h = rng.normal(size=(2, 3))
            else:
                h = rng.normal(size=3)
            scale = certificate_norm(spec, h)
            bound = plugin.lipschitz_bound
            # both are one-sided slopes of a bound-Lipschitz functional
            assert abs(numerical(h) - plugin(h)) <= 2.0 * bound * scale + 1e-12
        # far from every kink the difference quotient is exactly the slope
        if isinstance(spec, AbsMean):
            assert numerical(0.5) == pytest.approx(plugin(0.5), abs=1e-12)


def test_local_limit_law_max_tie_and_translation():
    rng = np.random.default_rng(11)
    # two-way tie with independent coordinates: E max(G1, G2) = 1/sqrt(pi)
    law = local_limit_law_max(np.zeros(2), np.eye(2), draws=200_000, rng=rng)
    mean = float(np.sum(law.atoms * law.probs))
    assert abs(mean - 1.0 / np.sqrt(np.pi)) <= 0.01

    # adding a constant to the drift cancels (same rng stream; the only
    # difference is float round-off in the shifted additions)
    a = local_limit_law_max(np.array([0.3, -0.2]), np.eye(2), 500,
                            np.random.default_rng(3))
    b = local_limit_law_max(np.array([0.3, -0.2]) + 7.0, np.eye(2), 500,
                            np.random.default_rng(3))
    assert np.allclose(a.atoms, b.atoms, atol=1e-12)

    # a runaway leader makes the law Gaussian in the leader's coordinate
    law = local_limit_law_max(np.array([0.0, -25.0]), np.eye(2), 200_000,
                              np.random.default_rng(4))
    mean = float(np.sum(law.atoms * law.probs))
    sd = float(np.sqrt(np.sum(law.probs * (law.atoms - mean) ** 2)))
    assert abs(mean) <= 0.01
    assert abs(sd - 1.0) <= 0.01

    # a genuinely correlated covariance is accepted via its Cholesky factor
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    law = local_limit_law_max(np.zeros(2), cov, draws=100, rng=rng)
    assert len(law) == 100

    with pytest.raises(ValueError):
        local_limit_law_max(np.zeros(2), np.eye(2), draws=0, rng=rng)
    with pytest.raises(ValueError):
        local_limit_law_max(np.zeros(2), np.eye(3), draws=10, rng=rng)
    with pytest.raises(ValueError):
        local_limit_law_max(np.zeros(2), np.array([[1.0, 2.0], [0.0, 1.0]]),
                            draws=10, rng=rng)
    with pytest.raises(ValueError):
        local_limit_law_max(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]),
                            draws=10, rng=rng)


def test_invariance_probe_flags_fold_but_not_linear():
    rng = np.random.default_rng(13)

    def sampler(k, gen):
        return gen.standard_normal(k)

    fold = lambda v: float(np.abs(np.asarray(v)).max())  # noqa: E731
    table = invariance_probe(fold, sampler, shifts=[0.0, 3.0], draws=4000,
                             rng=rng)
    assert table[0]["invariant"] is True  # shift 0 is the base law itself
    assert table[0]["bl_distance"] == pytest.approx(0.0, abs=1e-12)
    assert table[1]["invariant"] is False
    assert table[1]["bl_distance"] > 3.0 * table[1]["noise_floor"]

    linear = lambda v: float(np.sum(v))  # noqa: E731
    table = invariance_probe(linear, sampler, shifts=[0.0, 3.0, -5.0],
                             draws=4000, rng=np.random.default_rng(14))
    assert all(row["invariant"] for row in table)

    text = probe_table_to_csv(table)
    lines = text.strip().split("\n")
    assert lines[0] == "shift_id,shift,bl_distance,noise_floor,invariant"
    assert len(lines) == 4
    assert lines[1].split(",")[-1] == "1"

    with pytest.raises(ValueError):
        invariance_probe(linear, sampler, shifts=[0.0], draws=1, rng=rng)
