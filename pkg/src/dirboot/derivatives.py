"""Kinked functionals, their exact directional derivatives, and data-driven
derivative estimators carrying Lipschitz certificates.

The catalog covers the absolute value of a scalar mean, the maximum of a
coordinate vector, a one-sided (Cramer-von-Mises style) dominance functional
between two curves on a grid, and the distance to a closed convex set.  Each
functional is positively homogeneous of degree one in its direction argument
at the kink, which is exactly the regime where the standard bootstrap breaks
down and a composed derivative estimate is needed.

``invariance_probe`` measures how far a derivative closure is from being
shift-invariant: large bounded-Lipschitz distances between the shifted and
unshifted laws flag that the standard bootstrap would be inconsistent there.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import EmpiricalLaw, EstimateBundle, GridFunction, law_distance
from .projection import ConvexSet, derivative_sup_estimate, project, tangent_cone, project_tangent

__all__ = [
    "AbsMean",
    "MaxCoord",
    "StochDomCvM",
    "ConvexDistance",
    "DerivativeTuning",
    "DerivativeEstimate",
    "eval_functional",
    "eval_derivative",
    "estimate_derivative",
    "certificate_norm",
    "local_limit_law_max",
    "invariance_probe",
    "probe_table_to_csv",
]


# --------------------------------------------------------------------------
# functional catalog
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AbsMean:
    """phi(theta) = |theta| for a scalar theta; kinked at theta = 0."""

    def coerce(self, theta) -> float:
        arr = np.asarray(theta, dtype=float)
        if arr.size != 1:
            raise ValueError(
                f"AbsMean expects a scalar, got an array of shape {arr.shape}"
            )
        return float(arr.reshape(()))

    def evaluate(self, theta) -> float:
        return abs(self.coerce(theta))


@dataclass(frozen=True)
class MaxCoord:
    """phi(theta) = max_j theta_j for a vector; kinked at argmax ties."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be at least 1")

    def coerce(self, theta) -> np.ndarray:
        arr = np.asarray(theta, dtype=float).ravel()
        if arr.shape[0] != self.dim:
            raise ValueError(
                f"MaxCoord expects {self.dim} coordinates, got {arr.shape[0]}"
            )
        return arr

    def evaluate(self, theta) -> float:
        return float(np.max(self.coerce(theta)))


@dataclass(frozen=True)
class StochDomCvM:
    """One-sided gap functional between two curves sampled on a grid.

    ``phi(theta) = sum_i weight_i * max(theta1_i - theta2_i, 0) * cell_i``
    where the weight curve and quadrature cells come from ``weight``.  The
    value is zero exactly when curve 1 never exceeds curve 2 on the grid,
    i.e. when curve 2 dominates.
    """

    weight: GridFunction

    def __post_init__(self):
        if np.any(self.weight.values < 0):
            raise ValueError("dominance weight curve must be nonnegative")

    @property
    def mass(self) -> float:
        """Total quadrature mass, the Lipschitz constant of the functional."""
        return float(np.sum(self.weight.values * self.weight.weights))

    def coerce(self, theta) -> np.ndarray:
        """Accept a (2, T) array, a flat (2T,) vector, or a pair of curves."""
        if isinstance(theta, (tuple, list)) and len(theta) == 2:
            theta = np.stack([np.asarray(t, dtype=float).ravel() for t in theta])
        arr = np.asarray(theta, dtype=float)
        t = len(self.weight)
        if arr.ndim == 1 and arr.shape[0] == 2 * t:
            arr = arr.reshape(2, t)
        if arr.shape != (2, t):
            raise ValueError(
                f"StochDomCvM expects a pair of curves on {t} knots, "
                f"got shape {np.asarray(theta).shape}"
            )
        return arr

    def evaluate(self, theta) -> float:
        pair = self.coerce(theta)
        gap = pair[0] - pair[1]
        mass = self.weight.values * self.weight.weights
        return float(np.sum(mass * np.maximum(gap, 0.0)))


@dataclass(frozen=True)
class ConvexDistance:
    """phi(theta) = weighted distance from theta to a closed convex set."""

    convex_set: ConvexSet
    weights: np.ndarray | None = None

    def coerce(self, theta):
        if isinstance(theta, GridFunction):
            return theta
        arr = np.asarray(theta, dtype=float).ravel()
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.shape != arr.shape:
                raise ValueError("weights and theta must have equal length")
            return arr, w
        return arr

    def evaluate(self, theta) -> float:
        point = self.coerce(theta)
        if isinstance(point, tuple):
            point = _weight_carrier(*point)
        proj = project(self.convex_set, point)
        if isinstance(point, GridFunction):
            diff, w = point.values - proj.values, point.weights
        else:
            diff, w = point - np.asarray(proj, dtype=float), np.ones(point.shape)
        return float(np.sqrt(np.sum(w * diff * diff)))


def _weight_carrier(values: np.ndarray, weights: np.ndarray) -> GridFunction:
    """Wrap (values, weights) on a synthetic grid so the projection and
    tangent-cone machinery sees the intended weighted norm."""
    return GridFunction(np.arange(values.shape[0], dtype=float), values, weights)


FunctionalSpec = AbsMean | MaxCoord | StochDomCvM | ConvexDistance


def eval_functional(spec: FunctionalSpec, theta) -> float:
    """Value of the functional at ``theta`` (shape-checked)."""
    return spec.evaluate(theta)


# --------------------------------------------------------------------------
# exact directional derivatives
# --------------------------------------------------------------------------

_EXACT_ACTIVITY_TOL = 1e-9


def eval_derivative(spec: FunctionalSpec, theta0, h) -> float:
    """Exact directional derivative of the functional at ``theta0`` along ``h``.

    These are the population-level formulas with exact kink detection;
    ``estimate_derivative`` is the data-driven counterpart with tolerances.
    """
    if isinstance(spec, AbsMean):
        t0, d = spec.coerce(theta0), spec.coerce(h)
        return abs(d) if t0 == 0.0 else float(np.sign(t0)) * d
    if isinstance(spec, MaxCoord):
        t0, d = spec.coerce(theta0), spec.coerce(h)
        return float(np.max(d[t0 == np.max(t0)]))
    if isinstance(spec, StochDomCvM):
        t0, d = spec.coerce(theta0), spec.coerce(h)
        gap0, gap_h = t0[0] - t0[1], d[0] - d[1]
        mass = spec.weight.values * spec.weight.weights
        on_boundary = gap0 == 0.0
        strictly_above = gap0 > 0.0
        return float(
            np.sum(mass[strictly_above] * gap_h[strictly_above])
            + np.sum(mass[on_boundary] * np.maximum(gap_h[on_boundary], 0.0))
        )
    if isinstance(spec, ConvexDistance):
        return _convex_distance_derivative(spec, theta0, h, _EXACT_ACTIVITY_TOL)
    raise TypeError(f"unknown functional spec {type(spec).__name__}")


def _distance_parts(spec: ConvexDistance, theta0):
    point = spec.coerce(theta0)
    if isinstance(point, tuple):
        point = _weight_carrier(*point)
    proj = project(spec.convex_set, point)
    if isinstance(point, GridFunction):
        return point.values, proj.values, point.weights, point
    return point, np.asarray(proj, dtype=float), np.ones(point.shape), point


def _convex_distance_derivative(spec: ConvexDistance, theta0, h, tol: float) -> float:
    v, proj, w, point = _distance_parts(spec, theta0)
    d = np.asarray(h.values if isinstance(h, GridFunction) else h, dtype=float).ravel()
    gap = v - proj
    dist = float(np.sqrt(np.sum(w * gap * gap)))
    if dist > tol:
        # smooth regime: gradient of the distance is the unit residual
        return float(np.sum(w * gap * d)) / dist
    cone = tangent_cone(spec.convex_set, point, tol)
    direction = point.with_values(d) if isinstance(point, GridFunction) else d
    proj_dir = project_tangent(cone, direction)
    pd = proj_dir.values if isinstance(proj_dir, GridFunction) else np.asarray(proj_dir)
    return float(np.sqrt(np.sum(w * (d - pd) ** 2)))


# --------------------------------------------------------------------------
# data-driven derivative estimators
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DerivativeTuning:
    """Tuning constants for derivative estimation.

    Defaults follow the rate rules ``slack_tol = n^(-1/3)`` (kink detection),
    ``contact_tol = n^(-1/3)`` (near-boundary grid selection) and
    ``step = n^(-1/4)`` (numerical differencing); any field set explicitly
    wins over the rate rule.
    """

    slack_tol: float | None = None
    contact_tol: float | None = None
    step: float | None = None

    def resolved(self, sample_size: int) -> "DerivativeTuning":
        n = float(sample_size)
        return DerivativeTuning(
            slack_tol=self.slack_tol if self.slack_tol is not None else n ** (-1.0 / 3.0),
            contact_tol=(
                self.contact_tol if self.contact_tol is not None else n ** (-1.0 / 3.0)
            ),
            step=self.step if self.step is not None else n ** (-1.0 / 4.0),
        )

    def validate(self):
        for name in ("slack_tol", "contact_tol", "step"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive, got {value!r}")


@dataclass(frozen=True)
class DerivativeEstimate:
    """A derivative closure with its tuning record and Lipschitz certificate.

    ``lipschitz_bound`` certifies ``|est(h1) - est(h2)| <= bound * norm`` where
    ``norm`` is ``certificate_norm(spec, h1 - h2)`` for the matching spec.
    """

    evaluate: Callable[[object], float]
    tuning: DerivativeTuning
    lipschitz_bound: float
    detail: dict = field(default_factory=dict)

    def __call__(self, h) -> float:
        return self.evaluate(h)


def certificate_norm(spec: FunctionalSpec, delta) -> float:
    """The norm in which the functional's Lipschitz certificate is stated.

    AbsMean: absolute value.  MaxCoord: sup norm.  StochDomCvM: sup norm of
    the between-curve gap of ``delta`` (the functional reads the pair only
    through that gap).  ConvexDistance: the weighted Euclidean norm.
    """
    if isinstance(spec, AbsMean):
        return abs(spec.coerce(delta))
    if isinstance(spec, MaxCoord):
        return float(np.max(np.abs(spec.coerce(delta))))
    if isinstance(spec, StochDomCvM):
        pair = spec.coerce(delta)
        return float(np.max(np.abs(pair[0] - pair[1]))) if len(spec.weight) else 0.0
    if isinstance(spec, ConvexDistance):
        parts = spec.coerce(delta)
        if isinstance(parts, GridFunction):
            return parts.norm()
        if isinstance(parts, tuple):
            v, w = parts
            return float(np.sqrt(np.sum(w * v * v)))
        return float(np.sqrt(np.sum(parts * parts)))
    raise TypeError(f"unknown functional spec {type(spec).__name__}")


def estimate_derivative(
    spec: FunctionalSpec,
    bundle: EstimateBundle,
    tuning: DerivativeTuning | None = None,
    mode: str = "plugin",
) -> DerivativeEstimate:
    """Derivative estimate at the bundle's estimate, with kink tolerances.

    ``plugin`` (default) uses the functional's closed-form estimator: the
    scalar sign rule with a slack window, near-argmax selection, contact-set
    splitting, or a tangent-cone threshold rule.  ``numerical`` uses the
    one-sided difference quotient ``(phi(theta + step*h) - phi(theta))/step``.
    """
    tuning = (tuning or DerivativeTuning()).resolved(bundle.sample_size)
    tuning.validate()
    if mode == "numerical":
        return _numerical_estimate(spec, bundle, tuning)
    if mode != "plugin":
        raise ValueError(f"mode must be 'plugin' or 'numerical', got {mode!r}")

    theta = bundle.theta_hat
    if isinstance(spec, AbsMean):
        t0 = spec.coerce(theta)
        if abs(t0) <= tuning.slack_tol:
            closure, detail = (lambda h: abs(spec.coerce(h))), {"at_kink": True}
        else:
            s = float(np.sign(t0))
            closure, detail = (lambda h: s * spec.coerce(h)), {"at_kink": False}
        return DerivativeEstimate(closure, tuning, 1.0, detail)

    if isinstance(spec, MaxCoord):
        t0 = spec.coerce(theta)
        selected = np.flatnonzero(t0 >= np.max(t0) - tuning.slack_tol)

        def closure(h, _sel=selected):
            return float(np.max(spec.coerce(h)[_sel]))

        return DerivativeEstimate(closure, tuning, 1.0, {"selected": selected})

    if isinstance(spec, StochDomCvM):
        pair = spec.coerce(theta)
        gap0 = pair[0] - pair[1]
        strictly_above = gap0 > tuning.contact_tol
        on_boundary = np.abs(gap0) <= tuning.contact_tol
        mass = spec.weight.values * spec.weight.weights

        def closure(h, _above=strictly_above, _bdry=on_boundary, _mass=mass):
            gap_h = spec.coerce(h)
            gap_h = gap_h[0] - gap_h[1]
            return float(
                np.sum(_mass[_above] * gap_h[_above])
                + np.sum(_mass[_bdry] * np.maximum(gap_h[_bdry], 0.0))
            )

        detail = {"strictly_above": strictly_above, "on_boundary": on_boundary}
        return DerivativeEstimate(closure, tuning, spec.mass, detail)

    if isinstance(spec, ConvexDistance):
        est_bundle = bundle
        if spec.weights is not None and not isinstance(theta, GridFunction):
            carrier = _weight_carrier(
                np.asarray(theta, dtype=float).ravel(),
                np.asarray(spec.weights, dtype=float).ravel(),
            )
            est_bundle = EstimateBundle(carrier, bundle.sample_size,
                                        rate=bundle.rate)

        def closure(h):
            if isinstance(est_bundle.theta_hat, GridFunction) and not isinstance(
                h, GridFunction
            ):
                h = est_bundle.theta_hat.with_values(
                    np.asarray(h, dtype=float).ravel()
                )
            return derivative_sup_estimate(
                spec.convex_set, est_bundle, tuning.slack_tol, h, mode="threshold"
            )

        return DerivativeEstimate(closure, tuning, 1.0, {"epsilon": tuning.slack_tol})

    raise TypeError(f"unknown functional spec {type(spec).__name__}")


def _shift(spec: FunctionalSpec, theta, h, step: float):
    """theta + step*h in the functional's coordinate representation."""
    if isinstance(spec, AbsMean):
        return spec.coerce(theta) + step * spec.coerce(h)
    if isinstance(spec, (MaxCoord, StochDomCvM)):
        return spec.coerce(theta) + step * spec.coerce(h)
    if isinstance(theta, GridFunction):
        d = h.values if isinstance(h, GridFunction) else np.asarray(h, dtype=float)
        return theta.with_values(theta.values + step * d)
    return np.asarray(theta, dtype=float) + step * np.asarray(h, dtype=float)


def _numerical_estimate(spec, bundle, tuning) -> DerivativeEstimate:
    theta = bundle.theta_hat
    base = eval_functional(spec, theta)
    step = tuning.step

    def closure(h):
        return (eval_functional(spec, _shift(spec, theta, h, step)) - base) / step

    bound = spec.mass if isinstance(spec, StochDomCvM) else 1.0
    return DerivativeEstimate(closure, tuning, bound, {"numerical": True})


# --------------------------------------------------------------------------
# limit-law simulation and the shift-invariance probe
# --------------------------------------------------------------------------


def _psd_factor(covariance: np.ndarray) -> np.ndarray:
    cov = np.asarray(covariance, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(cov)
        floor = -1e-10 * max(1.0, float(np.max(np.abs(eigvals))))
        if np.min(eigvals) < floor:
            raise ValueError(
                f"covariance has negative eigenvalue {np.min(eigvals):.3e}"
            ) from None
        return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def local_limit_law_max(
    lam, covariance, draws: int, rng: np.random.Generator
) -> EmpiricalLaw:
    """Law of ``max(G + lam) - max(lam)`` for centered Gaussian G.

    This is the local limit of a max statistic under drift ``lam``; it shows
    explicitly how the limit law depends on the drift near argmax ties.
    """
    lam = np.asarray(lam, dtype=float).ravel()
    if draws < 1:
        raise ValueError("draws must be at least 1")
    factor = _psd_factor(covariance)
    if factor.shape[0] != lam.shape[0]:
        raise ValueError("lam and covariance dimensions differ")
    normals = rng.standard_normal((draws, lam.shape[0]))
    atoms = np.max(normals @ factor.T + lam, axis=1) - np.max(lam)
    return EmpiricalLaw(atoms)


def invariance_probe(
    derivative: Callable[[np.ndarray], float],
    limit_sampler: Callable[[int, np.random.Generator], np.ndarray],
    shifts: Sequence,
    draws: int,
    rng: np.random.Generator,
) -> list[dict]:
    """Distance of each shifted derivative law from the unshifted one.

    For each shift ``a`` the probe simulates ``derivative(G + a) -
    derivative(a)`` across draws of ``G`` from ``limit_sampler`` and reports
    the bounded-Lipschitz distance to the unshifted law (common draws for all
    shifts).  ``noise_floor = 3/sqrt(draws)`` is the resolution: distances at
    or below it are flagged invariant.  A distance clearly above the floor at
    some shift certifies that recentring alone cannot reproduce the limit law
    there — the failure mode of the standard resampling scheme at a kink.
    """
    if draws < 2:
        raise ValueError("draws must be at least 2")
    base_draws = np.asarray(limit_sampler(draws, rng), dtype=float)
    if base_draws.ndim == 1:
        base_draws = base_draws[:, None]
    if base_draws.shape[0] != draws:
        raise ValueError("limit_sampler returned the wrong number of draws")

    def law_at(shift_vec: np.ndarray) -> EmpiricalLaw:
        at_shift = derivative(shift_vec)
        values = [derivative(g + shift_vec) - at_shift for g in base_draws]
        return EmpiricalLaw(np.asarray(values))

    zero = np.zeros(base_draws.shape[1])
    base_law = law_at(zero)
    noise_floor = 3.0 / np.sqrt(draws)
    table = []
    for idx, shift in enumerate(shifts):
        shift_vec = np.broadcast_to(
            np.asarray(shift, dtype=float).ravel(), zero.shape
        ).astype(float)
        distance = law_distance(base_law, law_at(shift_vec), metric="bl")
        table.append(
            {
                "shift_id": idx,
                "shift": shift_vec,
                "bl_distance": float(distance),
                "noise_floor": float(noise_floor),
                "invariant": bool(distance <= noise_floor),
            }
        )
    return table


def probe_table_to_csv(table: list[dict]) -> str:
    """Serialize an invariance-probe table (stable column order)."""
    out = io.StringIO()
    out.write("shift_id,shift,bl_distance,noise_floor,invariant\n")
    for row in table:
        shift_txt = ";".join(format(x, ".17g") for x in row["shift"])
        out.write(
            f"{row['shift_id']},{shift_txt},"
            f"{format(row['bl_distance'], '.17g')},"
            f"{format(row['noise_floor'], '.17g')},"
            f"{int(row['invariant'])}\n"
        )
    return out.getvalue()
