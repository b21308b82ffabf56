"""Foundational types and generic inference operations.

Everything here is immutable and purely functional: weighted grid
representations of curve-valued parameters, empirical laws of scalar
statistics, plug-in test statistics, inf-style empirical quantiles,
distribution distances (bounded-Lipschitz and Kolmogorov-Smirnov),
difference-quotient checks for directional derivatives, and confidence
intervals by test inversion.  Randomness never enters this module.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lp import chain_lp_max

__all__ = [
    "GridFunction",
    "EstimateBundle",
    "EmpiricalLaw",
    "TestReport",
    "plug_in_statistic",
    "empirical_quantile",
    "law_distance",
    "directional_derivative_check",
    "invert_test_for_ci",
    "make_test_report",
    "empirical_law_to_csv",
    "empirical_law_from_csv",
    "grid_function_to_csv",
    "grid_function_from_csv",
]

# tolerance used when comparing accumulated probabilities to a level;
# guards against cumsum rounding (180/200 vs 0.9 and friends)
_CUM_PROB_TOL = 1e-9


def _readonly(a, dtype=float):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GridFunction:
    """A function known at finitely many knots with quadrature weights.

    The inner product ``<f, g> = sum_i w_i f_i g_i`` turns grid functions
    on a common grid into a finite-dimensional Hilbert space; ``weights``
    default to Riemann cell widths via :meth:`on_uniform_cells`.
    """

    grid: np.ndarray
    values: np.ndarray
    weights: np.ndarray

    def __init__(self, grid, values, weights=None):
        grid = _readonly(grid)
        values = _readonly(values)
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError("grid must be a nonempty 1-d array")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid knots must be strictly increasing")
        if weights is None:
            weights = _cell_widths(grid)
        weights = _readonly(weights)
        if values.shape != grid.shape or weights.shape != grid.shape:
            raise ValueError("grid, values and weights must share one length")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.grid.shape[0]

    def with_values(self, values):
        """Same grid and weights, new values."""
        return GridFunction(self.grid, values, self.weights)

    def inner(self, other: "GridFunction") -> float:
        if not np.array_equal(self.grid, other.grid):
            raise ValueError("inner product requires a common grid")
        return float(np.sum(self.weights * self.values * other.values))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.weights * self.values**2)))


def _cell_widths(grid):
    # midpoint Riemann cells, end cells extended to the boundary knots
    d = np.diff(grid)
    w = np.empty_like(grid)
    w[1:-1] = 0.5 * (d[:-1] + d[1:])
    w[0] = d[0] if d.size else 1.0
    w[-1] = d[-1] if d.size else 1.0
    if grid.shape[0] == 1:
        w[0] = 1.0
    return w


@dataclass(frozen=True)
class EstimateBundle:
    """An estimate, its sample size, and the scaling rate of its fluctuations.

    ``rate`` defaults to ``sqrt(sample_size)``; pass ``rate_exponent`` at
    construction for nonparametric rates.
    """

    theta_hat: "GridFunction | np.ndarray"
    sample_size: int
    rate: float

    def __init__(self, theta_hat, sample_size, rate=None, rate_exponent=0.5):
        if sample_size <= 0:
            raise ValueError("sample_size must be a positive integer")
        if rate is None:
            rate = float(sample_size) ** rate_exponent
        if rate <= 0:
            raise ValueError("rate must be positive")
        if not isinstance(theta_hat, GridFunction):
            theta_hat = _readonly(theta_hat)
        object.__setattr__(self, "theta_hat", theta_hat)
        object.__setattr__(self, "sample_size", int(sample_size))
        object.__setattr__(self, "rate", float(rate))


@dataclass(frozen=True)
class EmpiricalLaw:
    """A finite scalar distribution: sorted atoms with probabilities."""

    atoms: np.ndarray
    probs: np.ndarray

    def __init__(self, atoms, probs=None):
        atoms = np.asarray(atoms, dtype=float).ravel()
        if atoms.size == 0:
            raise ValueError("an empirical law needs at least one atom")
        if probs is None:
            probs = np.full(atoms.shape, 1.0 / atoms.size)
        else:
            probs = np.asarray(probs, dtype=float).ravel()
        if probs.shape != atoms.shape:
            raise ValueError("atoms and probs must have equal length")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        total = probs.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        order = np.argsort(atoms, kind="stable")
        object.__setattr__(self, "atoms", _readonly(atoms[order]))
        object.__setattr__(self, "probs", _readonly(probs[order]))

    def __len__(self):
        return self.atoms.shape[0]

    def cdf(self, x: float) -> float:
        """P(X <= x), ties included."""
        idx = np.searchsorted(self.atoms, x, side="right")
        return float(self.probs[:idx].sum())


@dataclass(frozen=True)
class TestReport:
    """Outcome of one hypothesis test run."""

    statistic: float
    critical_value: float
    alpha: float
    delta_bump: float
    reject: bool
    p_value: float
    seed_manifest: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.delta_bump < 0:
            raise ValueError("delta_bump must be nonnegative")
        expected = self.statistic > self.critical_value + self.delta_bump
        if bool(self.reject) != expected:
            raise ValueError("reject flag inconsistent with statistic vs "
                             "critical_value + delta_bump")

    def verdict_line(self) -> str:
        word = "reject" if self.reject else "fail to reject"
        return (f"statistic={self.statistic:.6f} "
                f"critical_value={self.critical_value:.6f} "
                f"(alpha={self.alpha:g}, delta={self.delta_bump:g}) -> {word}")


def make_test_report(statistic, law: EmpiricalLaw, alpha, delta_bump=0.0,
                     seed_manifest=None, diagnostics=None) -> TestReport:
    """Assemble a report from a statistic and the law of its critical values.

    The critical value is the inf-style ``1 - alpha`` quantile of ``law``;
    the p-value is ``1 - ecdf(statistic)`` with ties counted as <= .  The
    decision compares the statistic against ``critical + delta_bump``, which
    is the authoritative rule when a p-value and the decision disagree on an
    atom tie.
    """
    statistic = float(statistic)
    critical = empirical_quantile(law, 1.0 - alpha)
    p_value = 1.0 - law.cdf(statistic)
    # clamp float fuzz
    p_value = min(max(p_value, 0.0), 1.0)
    return TestReport(
        statistic=statistic,
        critical_value=critical,
        alpha=float(alpha),
        delta_bump=float(delta_bump),
        reject=bool(statistic > critical + delta_bump),
        p_value=p_value,
        seed_manifest=dict(seed_manifest or {}),
        diagnostics=dict(diagnostics or {}),
    )


def _evaluate_functional(functional, theta):
    if hasattr(functional, "evaluate"):
        return float(functional.evaluate(theta))
    if callable(functional):
        return float(functional(theta))
    raise TypeError("functional must be callable or expose .evaluate")


def plug_in_statistic(bundle: EstimateBundle, functional, center: float = 0.0) -> float:
    """``rate * (phi(theta_hat) - center)`` for a functional ``phi``.

    ``center`` defaults to 0, the boundary null value in the one-sided
    testing problems this package targets.
    """
    value = _evaluate_functional(functional, bundle.theta_hat)
    return bundle.rate * (value - float(center))


def empirical_quantile(law: EmpiricalLaw, level: float) -> float:
    """Smallest atom whose cumulative probability reaches ``level``.

    This is the inf-definition of the quantile — no interpolation — so the
    returned value is always an atom of the law.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    cum = np.cumsum(law.probs)
    idx = int(np.searchsorted(cum, level - _CUM_PROB_TOL, side="left"))
    idx = min(idx, len(law) - 1)
    return float(law.atoms[idx])


def _merged_support(law1: EmpiricalLaw, law2: EmpiricalLaw):
    support, inv = np.unique(np.concatenate([law1.atoms, law2.atoms]),
                             return_inverse=True)
    p = np.zeros(support.shape)
    q = np.zeros(support.shape)
    np.add.at(p, inv[: len(law1)], law1.probs)
    np.add.at(q, inv[len(law1):], law2.probs)
    return support, p, q


def law_distance(law1: EmpiricalLaw, law2: EmpiricalLaw, metric: str = "bl") -> float:
    """Distance between two empirical laws.

    ``metric="bl"``: bounded-Lipschitz distance, the exact optimum of
    ``max E_P f - E_Q f`` over functions with ``|f| <= 1`` and Lipschitz
    constant 1.  On a sorted merged support the Lipschitz constraints reduce
    to adjacent pairs, giving a chain LP solved exactly.  Range [0, 2].

    ``metric="ks"``: sup-norm distance of the two empirical cdfs.  Range [0, 1].
    """
    if metric not in ("bl", "ks"):
        raise ValueError(f"unknown metric {metric!r}; expected 'bl' or 'ks'")
    support, p, q = _merged_support(law1, law2)
    if metric == "ks":
        diff = np.cumsum(p - q)
        return float(np.max(np.abs(diff)))
    if support.shape[0] == 1:
        return 0.0
    value = chain_lp_max(p - q, np.diff(support))
    return max(0.0, value)


def directional_derivative_check(functional, derivative: Callable, theta0,
                                 direction, steps: Sequence[float],
                                 tail_fraction: float = 0.25) -> float:
    """Max residual of difference quotients against a claimed derivative.

    For each step ``t`` the residual ``|(phi(theta0 + t h) - phi(theta0))/t
    - derivative(h)|`` is formed; the maximum over the tail (smallest
    ``tail_fraction`` of the steps) is returned.  A catalog derivative is
    correct when this residual vanishes as steps shrink.
    """
    steps = np.asarray(list(steps), dtype=float)
    if steps.size == 0 or np.any(steps <= 0):
        raise ValueError("steps must be positive")
    if np.any(np.diff(steps) >= 0):
        raise ValueError("steps must be strictly decreasing")
    if isinstance(theta0, GridFunction):
        base = theta0.values
        rebuild = theta0.with_values
    else:
        base = np.asarray(theta0, dtype=float)
        rebuild = lambda v: v  # noqa: E731 - trivial passthrough
    h = np.asarray(direction.values if isinstance(direction, GridFunction)
                   else direction, dtype=float)
    if h.shape != base.shape:
        raise ValueError("direction shape does not match theta0")
    phi0 = _evaluate_functional(functional, theta0)
    dval = float(derivative(direction))
    residuals = []
    for t in steps:
        quotient = (_evaluate_functional(functional, rebuild(base + t * h)) - phi0) / t
        residuals.append(abs(quotient - dval))
    ntail = max(1, int(np.ceil(tail_fraction * steps.size)))
    return float(max(residuals[-ntail:]))


def invert_test_for_ci(test_closure: Callable[[float], TestReport],
                       candidate_grid, alpha: float):
    """Accepted-region confidence set by inverting a family of tests.

    ``test_closure(c0)`` must return a :class:`TestReport` for the two-sided
    null pinning the functional value at ``c0``.  Returns ``(accepted,
    intervals)`` where ``accepted`` is a boolean mask over the grid and
    ``intervals`` lists the contiguous accepted runs as (low, high) pairs.
    An empty acceptance region is a valid outcome.
    """
    grid = np.asarray(candidate_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("candidate grid must be a nonempty 1-d array")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("candidate grid must be strictly increasing")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    accepted = np.zeros(grid.shape, dtype=bool)
    for i, c0 in enumerate(grid):
        report = test_closure(float(c0))
        accepted[i] = not report.reject
    intervals = []
    i = 0
    while i < grid.size:
        if accepted[i]:
            j = i
            while j + 1 < grid.size and accepted[j + 1]:
                j += 1
            intervals.append((float(grid[i]), float(grid[j])))
            i = j + 1
        else:
            i += 1
    return accepted, intervals


# ---------------------------------------------------------------------------
# serialization: CSV and JSON, bit-exact round-trip at 17 significant digits
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def empirical_law_to_csv(law: EmpiricalLaw) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["atom", "prob"])
    for a, p in zip(law.atoms, law.probs):
        writer.writerow([_fmt(a), _fmt(p)])
    return buf.getvalue()


def empirical_law_from_csv(text: str) -> EmpiricalLaw:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:2] != ["atom", "prob"]:
        raise ValueError("expected CSV header 'atom,prob'")
    atoms = [float(r[0]) for r in rows[1:] if r]
    probs = [float(r[1]) for r in rows[1:] if r]
    return EmpiricalLaw(atoms, probs)


def grid_function_to_csv(f: GridFunction) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["knot", "value", "weight"])
    for t, v, w in zip(f.grid, f.values, f.weights):
        writer.writerow([_fmt(t), _fmt(v), _fmt(w)])
    return buf.getvalue()


def grid_function_from_csv(text: str) -> GridFunction:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:3] != ["knot", "value", "weight"]:
        raise ValueError("expected CSV header 'knot,value,weight'")
    body = [r for r in rows[1:] if r]
    return GridFunction([float(r[0]) for r in body],
                        [float(r[1]) for r in body],
                        [float(r[2]) for r in body])


def empirical_law_to_json(law: EmpiricalLaw) -> str:
    return json.dumps({"atoms": [float(a) for a in law.atoms],
                       "probs": [float(p) for p in law.probs]})


def empirical_law_from_json(text: str) -> EmpiricalLaw:
    obj = json.loads(text)
    return EmpiricalLaw(obj["atoms"], obj["probs"])


def grid_function_to_json(f: GridFunction) -> str:
    return json.dumps({"grid": [float(t) for t in f.grid],
                       "values": [float(v) for v in f.values],
                       "weights": [float(w) for w in f.weights]})


def grid_function_from_json(text: str) -> GridFunction:
    obj = json.loads(text)
    return GridFunction(obj["grid"], obj["values"], obj["weights"])
