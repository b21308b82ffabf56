"""Convex sets, metric projections, tangent cones, and the projection test.

The testing problem is "is the parameter inside a known closed convex set?".
The statistic is the scaled projection distance ``rate * ||theta_hat -
proj(theta_hat)||`` in the weighted norm.  Its limit law is the norm of the
residual of projecting the limit process onto the *tangent cone* at the
truth, so critical values come from the modified bootstrap with a derivative
estimate built from constraints that are nearly active at the projected
estimate (slack below a vanishing threshold ``eps_n = C * n**-kappa``).

Projections are exact where structure allows: coordinatewise clipping for
orthants and boxes, weighted pool-adjacent-violators for the monotone cone,
and Dykstra's alternating scheme for general halfspace intersections.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .bootstrap import (ResampleScheme, bootstrap_ensemble, law_degeneracy,
                        statistic_law)
from .core import EstimateBundle, GridFunction, TestReport, make_test_report

__all__ = [
    "ConvexSet",
    "NonpositiveOrthant",
    "Box",
    "MonotoneCone",
    "HalfspaceIntersection",
    "ConeSpec",
    "ProjectionError",
    "project",
    "distance_statistic",
    "tangent_cone",
    "project_tangent",
    "derivative_sup_estimate",
    "run_projection_test",
    "isotonic_fit",
]

DYKSTRA_MAX_SWEEPS = 100_000
DYKSTRA_TOL = 1e-10


class ProjectionError(RuntimeError):
    """Projection failed to converge; carries the last iterate and residual."""

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class ConvexSet:
    """Marker base for the closed convex sets in the catalog."""

    dim: int


@dataclass(frozen=True)
class NonpositiveOrthant(ConvexSet):
    """``{x : x_i <= 0 for all i}``."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")


@dataclass(frozen=True)
class Box(ConvexSet):
    """``{x : lower <= x <= upper}`` with infinite entries allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, lower, upper):
        lower = np.asarray(lower, dtype=float).copy()
        upper = np.asarray(upper, dtype=float).copy()
        if lower.shape != upper.shape or lower.ndim != 1 or lower.size == 0:
            raise ValueError("lower and upper must be equal-length 1-d arrays")
        if np.any(lower > upper):
            raise ValueError("box is empty: lower > upper somewhere")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self):
        return self.lower.shape[0]


@dataclass(frozen=True)
class MonotoneCone(ConvexSet):
    """Nondecreasing vectors: ``x_i <= x_{i+1}`` for every adjacent pair."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")


@dataclass(frozen=True)
class HalfspaceIntersection(ConvexSet):
    """``{x : normals @ x <= offsets}``, certified nonempty at construction."""

    normals: np.ndarray
    offsets: np.ndarray
    feasible_point: np.ndarray

    def __init__(self, normals, offsets, feasible_point):
        normals = np.atleast_2d(np.asarray(normals, dtype=float)).copy()
        offsets = np.asarray(offsets, dtype=float).ravel().copy()
        feasible_point = np.asarray(feasible_point, dtype=float).ravel().copy()
        if normals.shape[0] != offsets.shape[0]:
            raise ValueError("one offset per halfspace is required")
        if normals.shape[1] != feasible_point.shape[0]:
            raise ValueError("feasible point dimension mismatch")
        if np.any(np.linalg.norm(normals, axis=1) == 0):
            raise ValueError("zero normal vector")
        viol = normals @ feasible_point - offsets
        if np.any(viol > 1e-9):
            raise ValueError("claimed feasible point violates a constraint "
                             "by %g" % float(viol.max()))
        for a in (normals, offsets, feasible_point):
            a.setflags(write=False)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "feasible_point", feasible_point)

    @property
    def dim(self):
        return self.normals.shape[1]

    @property
    def n_constraints(self):
        return self.normals.shape[0]


@dataclass(frozen=True)
class ConeSpec:
    """A tangent cone described by its base set and binding constraints.

    Constraint indexing: orthant and MonotoneCone use coordinate / adjacent
    pair indices; Box enumerates upper bounds as ``0..d-1`` and lower bounds
    as ``d..2d-1``; HalfspaceIntersection uses row indices.  An empty active
    set is the whole space.
    """

    base: ConvexSet
    active: tuple = field(default_factory=tuple)

    def __post_init__(self):
        active = tuple(sorted(int(i) for i in self.active))
        if isinstance(self.base, NonpositiveOrthant):
            limit = self.base.dim
        elif isinstance(self.base, Box):
            limit = 2 * self.base.dim
        elif isinstance(self.base, MonotoneCone):
            limit = self.base.dim - 1
        elif isinstance(self.base, HalfspaceIntersection):
            limit = self.base.n_constraints
        else:
            raise TypeError(f"unsupported base set {type(self.base).__name__}")
        if any(i < 0 or i >= limit for i in active):
            raise ValueError("active index out of the constraint range")
        if len(set(active)) != len(active):
            raise ValueError("duplicate active indices")
        object.__setattr__(self, "active", active)


# ---------------------------------------------------------------------------
# weighted isotonic regression (pool adjacent violators)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _pava(y, w):  # pragma: no cover - exercised via isotonic_fit
    n = y.shape[0]
    mean = np.empty(n)
    weight = np.empty(n)
    count = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        mean[k] = y[i]
        weight[k] = w[i]
        count[k] = 1
        k += 1
        while k > 1 and mean[k - 2] > mean[k - 1]:
            tot = weight[k - 2] + weight[k - 1]
            if tot > 0.0:
                mean[k - 2] = (mean[k - 2] * weight[k - 2]
                               + mean[k - 1] * weight[k - 1]) / tot
            weight[k - 2] = tot
            count[k - 2] += count[k - 1]
            k -= 1
    out = np.empty(n)
    pos = 0
    for b in range(k):
        for _ in range(count[b]):
            out[pos] = mean[b]
            pos += 1
    return out


def isotonic_fit(values, weights=None) -> np.ndarray:
    """Weighted least-squares projection onto nondecreasing vectors."""
    y = np.ascontiguousarray(values, dtype=np.float64)
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.ascontiguousarray(weights, dtype=np.float64)
    if y.shape != w.shape or y.ndim != 1:
        raise ValueError("values and weights must be equal-length 1-d arrays")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    return _pava(y, w)


# ---------------------------------------------------------------------------
# Dykstra's alternating projections for halfspace systems
# ---------------------------------------------------------------------------

def _dykstra(point, weights, normals, offsets, equality, tol, max_sweeps):
    """Project onto the intersection of halfspaces (or hyperplanes) in the
    weighted norm.  ``equality[j]`` marks row j as an equality constraint."""
    x = point.astype(float).copy()
    m = normals.shape[0]
    if m == 0:
        return x
    inv_w = 1.0 / weights
    gram = np.array([np.dot(normals[j] * inv_w, normals[j]) for j in range(m)])
    corrections = np.zeros((m, x.shape[0]))
    for _ in range(max_sweeps):
        x_prev = x.copy()
        for j in range(m):
            y = x + corrections[j]
            resid = np.dot(normals[j], y) - offsets[j]
            if equality[j] or resid > 0.0:
                step = resid / gram[j]
                x = y - step * inv_w * normals[j]
            else:
                x = y
            corrections[j] = y - x
        shift = np.sqrt(np.sum(weights * (x - x_prev) ** 2))
        if shift < tol:
            return x
    raise ProjectionError(
        "Dykstra did not converge in %d sweeps (last shift %g)"
        % (max_sweeps, shift), last_iterate=x, residual=shift)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def _unpack(point):
    """(values, weights, rewrap) for a GridFunction or plain vector."""
    if isinstance(point, GridFunction):
        return (np.asarray(point.values, dtype=float),
                np.asarray(point.weights, dtype=float),
                point.with_values)
    v = np.asarray(point, dtype=float)
    if v.ndim != 1:
        raise ValueError("point must be 1-d (or a GridFunction)")
    return v, np.ones_like(v), (lambda out: out)


def _weighted_norm(values, weights):
    return float(np.sqrt(np.sum(weights * values**2)))


def project(convex_set: ConvexSet, point, tol: float = DYKSTRA_TOL):
    """Metric projection onto the set in the weighted norm.

    Exact for orthants, boxes (clipping — the norm is coordinate-separable)
    and the monotone cone (weighted pool-adjacent-violators); iterative
    (Dykstra) for halfspace intersections, to tolerance ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v, w, rewrap = _unpack(point)
    if v.shape[0] != convex_set.dim:
        raise ValueError(f"point has dimension {v.shape[0]}, "
                         f"set has dimension {convex_set.dim}")
    if isinstance(convex_set, NonpositiveOrthant):
        out = np.minimum(v, 0.0)
    elif isinstance(convex_set, Box):
        out = np.clip(v, convex_set.lower, convex_set.upper)
    elif isinstance(convex_set, MonotoneCone):
        out = isotonic_fit(v, w)
    elif isinstance(convex_set, HalfspaceIntersection):
        out = _dykstra(v, w, convex_set.normals, convex_set.offsets,
                       np.zeros(convex_set.n_constraints, dtype=bool),
                       tol, DYKSTRA_MAX_SWEEPS)
    else:
        raise TypeError(f"unsupported set {type(convex_set).__name__}")
    return rewrap(out)


def distance_statistic(bundle: EstimateBundle, convex_set: ConvexSet) -> float:
    """``rate * ||theta_hat - proj(theta_hat)||`` in the weighted norm."""
    v, w, _ = _unpack(bundle.theta_hat)
    proj, _, _ = _unpack(project(convex_set, bundle.theta_hat))
    return bundle.rate * _weighted_norm(v - proj, w)


def tangent_cone(convex_set: ConvexSet, point, activity_tol: float) -> ConeSpec:
    """Cone of feasible directions, described by near-binding constraints.

    ``point`` must lie within ``activity_tol`` of the set (project first
    otherwise).  A constraint is active when its slack at ``point`` is at
    most ``activity_tol``.
    """
    if activity_tol <= 0:
        raise ValueError("activity_tol must be positive")
    v, w, _ = _unpack(point)
    proj, _, _ = _unpack(project(convex_set, point))
    dist = _weighted_norm(v - proj, w)
    if dist > activity_tol:
        raise ValueError(
            f"point is {dist:g} away from the set (activity_tol "
            f"{activity_tol:g}); project it onto the set first")
    if isinstance(convex_set, NonpositiveOrthant):
        active = np.flatnonzero(np.abs(v) <= activity_tol)
    elif isinstance(convex_set, Box):
        up = np.flatnonzero(np.abs(v - convex_set.upper) <= activity_tol)
        lo = np.flatnonzero(np.abs(v - convex_set.lower) <= activity_tol)
        active = np.concatenate([up, lo + convex_set.dim])
    elif isinstance(convex_set, MonotoneCone):
        active = np.flatnonzero(np.diff(v) <= activity_tol)
    elif isinstance(convex_set, HalfspaceIntersection):
        slack = np.abs(convex_set.normals @ v - convex_set.offsets)
        active = np.flatnonzero(slack <= activity_tol)
    else:
        raise TypeError(f"unsupported set {type(convex_set).__name__}")
    return ConeSpec(base=convex_set, active=tuple(int(i) for i in active))


def _monotone_chains(active, dim):
    """Maximal runs of consecutive active pair indices -> coordinate spans."""
    chains = []
    active = sorted(active)
    i = 0
    while i < len(active):
        j = i
        while j + 1 < len(active) and active[j + 1] == active[j] + 1:
            j += 1
        chains.append((active[i], active[j] + 1))  # coordinate span [a, b]
        i = j + 1
    return chains


def project_tangent(cone: ConeSpec, direction):
    """Projection of a direction onto the tangent cone, weighted norm."""
    v, w, rewrap = _unpack(direction)
    base = cone.base
    if v.shape[0] != base.dim:
        raise ValueError("direction dimension does not match the cone")
    if not cone.active:
        return rewrap(v.copy())
    if isinstance(base, NonpositiveOrthant):
        out = v.copy()
        idx = np.asarray(cone.active, dtype=int)
        out[idx] = np.minimum(out[idx], 0.0)
    elif isinstance(base, Box):
        out = v.copy()
        d = base.dim
        for i in cone.active:
            if i < d:  # at the upper bound: cannot increase
                out[i] = min(out[i], 0.0)
            else:  # at the lower bound: cannot decrease
                out[i - d] = max(out[i - d], 0.0)
    elif isinstance(base, MonotoneCone):
        out = v.copy()
        for a, b in _monotone_chains(cone.active, base.dim):
            out[a:b + 1] = isotonic_fit(v[a:b + 1], w[a:b + 1])
    elif isinstance(base, HalfspaceIntersection):
        idx = np.asarray(cone.active, dtype=int)
        normals = base.normals[idx]
        out = _dykstra(v, w, normals, np.zeros(idx.shape[0]),
                       np.zeros(idx.shape[0], dtype=bool),
                       DYKSTRA_TOL, DYKSTRA_MAX_SWEEPS)
    else:
        raise TypeError(f"unsupported base set {type(base).__name__}")
    return rewrap(out)


# ---------------------------------------------------------------------------
# derivative estimation for the projection distance
# ---------------------------------------------------------------------------

def _residual_norm(cone: ConeSpec, direction) -> float:
    v, w, _ = _unpack(direction)
    proj, _, _ = _unpack(project_tangent(cone, direction))
    return _weighted_norm(v - proj, w)


def _activation_cost(convex_set, proj_values, weights, subset) -> float:
    """Weighted distance from the projected estimate to the cheapest point of
    the set with every constraint in ``subset`` binding (inf if impossible)."""
    v, w = proj_values, weights
    if not subset:
        return 0.0
    if isinstance(convex_set, NonpositiveOrthant):
        idx = np.asarray(sorted(subset), dtype=int)
        return _weighted_norm(v[idx], w[idx])
    if isinstance(convex_set, Box):
        d = convex_set.dim
        upper_coords = {i for i in subset if i < d}
        lower_coords = {i - d for i in subset if i >= d}
        target = v.copy()
        for coord in upper_coords | lower_coords:
            both = coord in upper_coords and coord in lower_coords
            if both and convex_set.lower[coord] < convex_set.upper[coord]:
                return np.inf  # both bounds of one coordinate cannot bind
            bound = (convex_set.upper[coord] if coord in upper_coords
                     else convex_set.lower[coord])
            if not np.isfinite(bound):
                return np.inf
            target[coord] = bound
        return _weighted_norm(v - target, w)
    if isinstance(convex_set, MonotoneCone):
        # fuse coordinates tied by the requested pairs, then redo isotonic
        cuts = _monotone_chains(sorted(subset), convex_set.dim)
        node_val, node_w, spans = [], [], []
        ptr = 0
        i = 0
        while i < v.shape[0]:
            if ptr < len(cuts) and cuts[ptr][0] == i:
                a, b = cuts[ptr]
                wsum = w[a:b + 1].sum()
                node_val.append(float(np.dot(w[a:b + 1], v[a:b + 1]) / wsum))
                node_w.append(float(wsum))
                spans.append((a, b))
                i = b + 1
                ptr += 1
            else:
                node_val.append(float(v[i]))
                node_w.append(float(w[i]))
                spans.append((i, i))
                i += 1
        fitted_nodes = isotonic_fit(np.array(node_val), np.array(node_w))
        fitted = np.empty_like(v)
        for val, (a, b) in zip(fitted_nodes, spans):
            fitted[a:b + 1] = val
        return _weighted_norm(v - fitted, w)
    if isinstance(convex_set, HalfspaceIntersection):
        equality = np.zeros(convex_set.n_constraints, dtype=bool)
        for j in subset:
            equality[j] = True
        try:
            target = _dykstra(v, w, convex_set.normals, convex_set.offsets,
                              equality, DYKSTRA_TOL, DYKSTRA_MAX_SWEEPS)
        except ProjectionError:
            return np.inf
        return _weighted_norm(v - target, w)
    raise TypeError(f"unsupported set {type(convex_set).__name__}")


_EXHAUSTIVE_LIMIT = 12


def derivative_sup_estimate(convex_set: ConvexSet, bundle: EstimateBundle,
                            epsilon_n: float, direction,
                            mode: str = "threshold") -> float:
    """Estimated directional derivative of the projection distance.

    ``threshold`` (default): constraints with slack at most ``epsilon_n`` at
    the projected estimate form the estimated tangent cone; the value is the
    weighted norm of the direction's residual after projecting onto it.

    ``sup-search``: maximizes that residual norm over cones generated by
    subsets of the candidate constraints whose joint activation stays within
    weighted distance ``epsilon_n`` of the projected estimate — exhaustive
    for at most 12 candidates, greedy (by increasing slack) beyond.  Neither
    mode dominates the other in general; compare them via diagnostics.
    """
    if epsilon_n <= 0:
        raise ValueError("epsilon_n must be positive")
    if mode not in ("threshold", "sup-search"):
        raise ValueError(f"unknown mode {mode!r}")
    proj = project(convex_set, bundle.theta_hat)
    cone = tangent_cone(convex_set, proj, epsilon_n)
    if mode == "threshold":
        return _residual_norm(cone, direction)
    candidates = list(cone.active)
    v, w, _ = _unpack(proj)
    best = _residual_norm(ConeSpec(convex_set, ()), direction)
    if len(candidates) <= _EXHAUSTIVE_LIMIT:
        for r in range(1, len(candidates) + 1):
            for subset in itertools.combinations(candidates, r):
                if _activation_cost(convex_set, v, w, subset) <= epsilon_n:
                    value = _residual_norm(ConeSpec(convex_set, subset),
                                           direction)
                    if value > best:
                        best = value
    else:
        slack = _constraint_slack(convex_set, v)
        order = sorted(candidates, key=lambda i: slack[i])
        chosen = []
        for i in order:
            if _activation_cost(convex_set, v, w, chosen + [i]) <= epsilon_n:
                chosen.append(i)
        if chosen:
            best = max(best, _residual_norm(ConeSpec(convex_set, tuple(chosen)),
                                            direction))
    return best


def _constraint_slack(convex_set, values):
    if isinstance(convex_set, NonpositiveOrthant):
        return {int(i): abs(float(values[i])) for i in range(convex_set.dim)}
    if isinstance(convex_set, Box):
        d = convex_set.dim
        out = {}
        for i in range(d):
            out[i] = abs(float(values[i] - convex_set.upper[i]))
            out[d + i] = abs(float(values[i] - convex_set.lower[i]))
        return out
    if isinstance(convex_set, MonotoneCone):
        gaps = np.diff(values)
        return {int(i): float(gaps[i]) for i in range(gaps.shape[0])}
    if isinstance(convex_set, HalfspaceIntersection):
        slack = np.abs(convex_set.normals @ values - convex_set.offsets)
        return {int(i): float(slack[i]) for i in range(slack.shape[0])}
    raise TypeError(f"unsupported set {type(convex_set).__name__}")


def run_projection_test(data_to_bundle, data, convex_set: ConvexSet,
                        epsilon_const: float = 1.0,
                        epsilon_exponent: float = 1.0 / 3.0,
                        alpha: float = 0.05, delta_bump: float = 0.0,
                        B: int = 500, scheme: ResampleScheme | None = None,
                        master_seed: int = 0, mode: str = "threshold",
                        n_mode_probe: int = 20) -> TestReport:
    """Test membership of the parameter in a closed convex set.

    ``data_to_bundle(data, weights)`` fits the (possibly reweighted) sample
    and returns an :class:`EstimateBundle`; ``weights=None`` is the original
    fit.  The activation threshold is ``epsilon_const * n**-epsilon_exponent``.
    The report's diagnostics compare the threshold and sup-search derivative
    modes on the first few bootstrap perturbations and flag degenerate laws.
    """
    scheme = scheme or ResampleScheme()
    bundle = data_to_bundle(data, None)
    n = bundle.sample_size
    eps_n = epsilon_const * float(n) ** (-epsilon_exponent)
    statistic = distance_statistic(bundle, convex_set)

    def estimator(d, wts):
        b = bundle if wts is None else data_to_bundle(d, wts)
        return b.theta_hat

    ensemble = bootstrap_ensemble(estimator, data, B, scheme, master_seed,
                                  rate=bundle.rate, theta_hat=bundle.theta_hat)

    def derivative(h):
        return derivative_sup_estimate(convex_set, bundle, eps_n, h, mode=mode)

    law = statistic_law(ensemble, "modified", derivative=derivative)
    diagnostics = law_degeneracy(law)
    diagnostics["epsilon_n"] = eps_n
    proj = project(convex_set, bundle.theta_hat)
    diagnostics["n_active"] = len(tangent_cone(convex_set, proj, eps_n).active)
    probe = min(n_mode_probe, len(ensemble))
    thr = [derivative_sup_estimate(convex_set, bundle, eps_n,
                                   ensemble.draw(b), "threshold")
           for b in range(probe)]
    sup = [derivative_sup_estimate(convex_set, bundle, eps_n,
                                   ensemble.draw(b), "sup-search")
           for b in range(probe)]
    diagnostics["derivative_mode_probe"] = {
        "n_draws": probe,
        "threshold_mean": float(np.mean(thr)) if thr else 0.0,
        "sup_search_mean": float(np.mean(sup)) if sup else 0.0,
        "max_abs_gap": float(np.max(np.abs(np.array(thr) - np.array(sup))))
        if thr else 0.0,
    }
    manifest = dict(ensemble.seed_manifest)
    manifest["epsilon_const"] = float(epsilon_const)
    manifest["epsilon_exponent"] = float(epsilon_exponent)
    return make_test_report(statistic, law, alpha, delta_bump,
                            seed_manifest=manifest, diagnostics=diagnostics)
