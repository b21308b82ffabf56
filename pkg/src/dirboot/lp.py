"""Linear-programming kernels shared across the package.

Two solvers live here:

``dense_simplex``
    A self-contained two-phase dense tableau simplex with Bland's
    anti-cycling rule.  It is the reference route for every LP in the
    package (bounded-Lipschitz distances, check-function regressions) and
    is exercised against the fast production paths by the property tests.

``chain_lp_max``
    Exact maximizer of ``sum(c_i * f_i)`` subject to ``|f_i| <= 1`` and
    ``|f_{i+1} - f_i| <= d_i``.  This is the bounded-Lipschitz dual on a
    sorted merged support; the constraint graph is a path, so dynamic
    programming over concave piecewise-linear value functions solves it
    exactly and scales to tens of thousands of atoms where a dense
    tableau cannot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "LinearProgramError",
    "SimplexResult",
    "dense_simplex",
    "chain_lp_max",
    "bl_lp_reference",
    "FEASIBILITY_TOL",
]

FEASIBILITY_TOL = 1e-9
_MAX_TABLEAU_ENTRIES = 20_000_000


class LinearProgramError(RuntimeError):
    """Raised when an LP cannot be solved to optimality."""


@dataclass(frozen=True)
class SimplexResult:
    x: np.ndarray
    objective: float
    iterations: int


def _bland_entering(reduced, tol):
    # smallest index with a strictly negative reduced cost
    for j in range(reduced.shape[0]):
        if reduced[j] < -tol:
            return j
    return -1


def _bland_leaving(col, rhs, basis, tol):
    best_ratio = np.inf
    best_row = -1
    for i in range(col.shape[0]):
        if col[i] > tol:
            ratio = rhs[i] / col[i]
            if ratio < best_ratio - tol or (
                abs(ratio - best_ratio) <= tol
                and best_row >= 0
                and basis[i] < basis[best_row]
            ):
                best_ratio = ratio
                best_row = i
    return best_row


def _run_simplex(tableau, basis, ncols_priced, tol, max_iter):
    """Pivot ``tableau`` (last row = objective, last col = rhs) to optimality."""
    iterations = 0
    while True:
        reduced = tableau[-1, :ncols_priced]
        j = _bland_entering(reduced, tol)
        if j < 0:
            return iterations
        col = tableau[:-1, j]
        rhs = tableau[:-1, -1]
        i = _bland_leaving(col, rhs, basis, tol)
        if i < 0:
            raise LinearProgramError("LP is unbounded along column %d" % j)
        piv = tableau[i, j]
        tableau[i, :] /= piv
        for r in range(tableau.shape[0]):
            if r != i and tableau[r, j] != 0.0:
                tableau[r, :] -= tableau[r, j] * tableau[i, :]
        basis[i] = j
        iterations += 1
        if iterations > max_iter:
            raise LinearProgramError(
                "simplex exceeded %d iterations (Bland's rule active)" % max_iter
            )


def dense_simplex(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None,
                  maximize=False, tol=FEASIBILITY_TOL, max_iter=100_000):
    """Solve ``min c'x`` (or max) s.t. ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``x >= 0``.

    Dense two-phase tableau simplex with Bland's rule for both entering and
    leaving variables, so cycling is impossible.  Intended for small and
    medium instances; raises :class:`LinearProgramError` on infeasible or
    unbounded problems.
    """
    c = np.asarray(c, dtype=float)
    if maximize:
        c = -c
    n = c.shape[0]
    rows = []
    rhs = []
    slack_rows = []
    if A_ub is not None:
        A_ub = np.atleast_2d(np.asarray(A_ub, dtype=float))
        b_ub = np.atleast_1d(np.asarray(b_ub, dtype=float))
        for i in range(A_ub.shape[0]):
            rows.append(A_ub[i])
            rhs.append(b_ub[i])
            slack_rows.append(len(rows) - 1)
    n_slack = len(slack_rows)
    if A_eq is not None:
        A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
        b_eq = np.atleast_1d(np.asarray(b_eq, dtype=float))
        for i in range(A_eq.shape[0]):
            rows.append(A_eq[i])
            rhs.append(b_eq[i])
    m = len(rows)
    if m == 0:
        raise LinearProgramError("no constraints supplied")
    A = np.zeros((m, n + n_slack))
    A[:, :n] = np.vstack(rows)
    for k, r in enumerate(slack_rows):
        A[r, n + k] = 1.0
    b = np.asarray(rhs, dtype=float)

    # make rhs nonnegative
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    # rows whose slack still provides an identity column need no artificial
    needs_artificial = np.ones(m, dtype=bool)
    for k, r in enumerate(slack_rows):
        if not neg[r]:
            needs_artificial[r] = False
    art_rows = np.flatnonzero(needs_artificial)
    n_art = art_rows.shape[0]
    total = n + n_slack + n_art
    if (m + 1) * (total + 1) > _MAX_TABLEAU_ENTRIES:
        raise LinearProgramError(
            "instance too large for the dense tableau (%d x %d)" % (m, total)
        )

    tableau = np.zeros((m + 1, total + 1))
    tableau[:m, : n + n_slack] = A
    tableau[:m, -1] = b
    basis = np.empty(m, dtype=np.int64)
    for k, r in enumerate(slack_rows):
        basis[r] = n + k
    for k, r in enumerate(art_rows):
        tableau[r, n + n_slack + k] = 1.0
        basis[r] = n + n_slack + k

    iters = 0
    if n_art:
        # phase 1: minimize the sum of artificials
        tableau[-1, :] = 0.0
        for r in art_rows:
            tableau[-1, :] -= tableau[r, :]
        # basic columns must price at zero: add back the +1 phase-1 cost that
        # each artificial contributes to its own column
        tableau[-1, n + n_slack: total] += 1.0
        iters += _run_simplex(tableau, basis, total, tol, max_iter)
        if tableau[-1, -1] < -tol:
            raise LinearProgramError("LP infeasible (phase-1 optimum %g)"
                                     % -tableau[-1, -1])
        # pivot any zero-level artificial out of the basis
        for i in range(m):
            if basis[i] >= n + n_slack:
                for j in range(n + n_slack):
                    if abs(tableau[i, j]) > tol:
                        piv = tableau[i, j]
                        tableau[i, :] /= piv
                        for r in range(m + 1):
                            if r != i and tableau[r, j] != 0.0:
                                tableau[r, :] -= tableau[r, j] * tableau[i, :]
                        basis[i] = j
                        break
        tableau[:, n + n_slack:total] = 0.0

    # phase 2
    tableau[-1, :] = 0.0
    tableau[-1, :n] = c
    for i in range(m):
        if basis[i] < n + n_slack and tableau[-1, basis[i]] != 0.0:
            tableau[-1, :] -= tableau[-1, basis[i]] * tableau[i, :]
    iters += _run_simplex(tableau, basis, n + n_slack, tol, max_iter)

    x = np.zeros(n + n_slack)
    for i in range(m):
        if basis[i] < n + n_slack:
            x[basis[i]] = tableau[i, -1]
    objective = float(np.dot(c, x[:n]))
    if maximize:
        objective = -objective
    return SimplexResult(x=x[:n], objective=objective, iterations=iters)


# ---------------------------------------------------------------------------
# chain LP: max c'f  s.t.  |f| <= 1, |f_{i+1} - f_i| <= d_i
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _chain_lp_max(c, d):  # pragma: no cover - exercised via chain_lp_max
    m = c.shape[0]
    # each step adds at most 4 breakpoints (two window edges, two domain ends)
    cap = 4 * m + 16
    xs = np.empty(cap)
    vs = np.empty(cap)
    nxs = np.empty(cap)
    nvs = np.empty(cap)
    # V_1(x) = c_0 * x on [-1, 1]
    xs[0] = -1.0
    vs[0] = -c[0]
    xs[1] = 1.0
    vs[1] = c[0]
    k = 2

    for step in range(1, m):
        dd = d[step - 1]
        # locate the (contiguous) peak of the concave PL function
        vmax = vs[0]
        for i in range(1, k):
            if vs[i] > vmax:
                vmax = vs[i]
        il = 0
        while vs[il] != vmax:
            il += 1
        ir = k - 1
        while vs[ir] != vmax:
            ir -= 1
        pl = xs[il]
        pr = xs[ir]

        nk = 0
        # rising branch: g(x) = V(x + dd) for x < pl - dd
        lo = pl - dd
        if lo > -1.0:
            # value at x = -1 is V(-1 + dd): interpolate
            y = -1.0 + dd
            # find segment containing y (y < pl <= xs[ir]); walk
            j = 0
            while j + 1 < k and xs[j + 1] < y:
                j += 1
            if j + 1 >= k:
                val = vs[k - 1]
            elif xs[j + 1] == xs[j]:
                val = vs[j + 1]
            else:
                t = (y - xs[j]) / (xs[j + 1] - xs[j])
                val = vs[j] + t * (vs[j + 1] - vs[j])
            nxs[nk] = -1.0
            nvs[nk] = val
            nk += 1
            for j in range(k):
                xj = xs[j] - dd
                if -1.0 < xj < lo:
                    nxs[nk] = xj
                    nvs[nk] = vs[j]
                    nk += 1
            nxs[nk] = lo
            nvs[nk] = vmax
            nk += 1
        else:
            nxs[nk] = -1.0
            nvs[nk] = vmax
            nk += 1
        # flat top ends at pr + dd
        hi = pr + dd
        if hi < 1.0:
            nxs[nk] = hi
            nvs[nk] = vmax
            nk += 1
            for j in range(k):
                xj = xs[j] + dd
                if hi < xj < 1.0:
                    nxs[nk] = xj
                    nvs[nk] = vs[j]
                    nk += 1
            # value at x = 1 is V(1 - dd)
            y = 1.0 - dd
            j = 0
            while j + 1 < k and xs[j + 1] < y:
                j += 1
            if j + 1 >= k:
                val = vs[k - 1]
            elif xs[j + 1] == xs[j]:
                val = vs[j + 1]
            else:
                t = (y - xs[j]) / (xs[j + 1] - xs[j])
                val = vs[j] + t * (vs[j + 1] - vs[j])
            nxs[nk] = 1.0
            nvs[nk] = val
            nk += 1
        else:
            nxs[nk] = 1.0
            nvs[nk] = vmax
            nk += 1

        # add the new linear term c[step] * x
        for j in range(nk):
            nvs[j] += c[step] * nxs[j]

        # copy back (nk <= k + 4 <= cap by construction)
        if nk > cap:
            return np.nan
        for j in range(nk):
            xs[j] = nxs[j]
            vs[j] = nvs[j]
        k = nk

        # prune exactly collinear interior breakpoints to keep k small
        if k > 2:
            w = 1
            for j in range(1, k - 1):
                x0, x1, x2 = xs[w - 1], xs[j], xs[j + 1]
                v0, v1, v2 = vs[w - 1], vs[j], vs[j + 1]
                keep = True
                if x2 > x0:
                    t = (x1 - x0) / (x2 - x0)
                    interp = v0 + t * (v2 - v0)
                    if abs(interp - v1) <= 1e-15 * (1.0 + abs(v1)):
                        keep = False
                if keep:
                    xs[w] = x1
                    vs[w] = v1
                    w += 1
            xs[w] = xs[k - 1]
            vs[w] = vs[k - 1]
            k = w + 1

    out = vs[0]
    for i in range(1, k):
        if vs[i] > out:
            out = vs[i]
    return out


def chain_lp_max(c, d):
    """Exact optimum of ``max c'f`` with ``|f_i|<=1`` and ``|f_{i+1}-f_i|<=d_i``.

    Parameters
    ----------
    c : array of length m
        Linear objective coefficients at the (sorted) support points.
    d : array of length m-1
        Nonnegative adjacent-gap bounds.
    """
    c = np.ascontiguousarray(c, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.float64)
    if c.ndim != 1 or d.shape[0] != max(c.shape[0] - 1, 0):
        raise ValueError("need len(d) == len(c) - 1")
    if c.shape[0] == 0:
        raise ValueError("empty objective")
    if np.any(d < 0):
        raise ValueError("gap bounds must be nonnegative")
    if c.shape[0] == 1:
        return abs(float(c[0]))
    val = _chain_lp_max(c, d)
    if np.isnan(val):
        raise LinearProgramError("chain LP value-function buffer overflow")
    return float(val)


def bl_lp_reference(c, d, tol=FEASIBILITY_TOL):
    """Dense-simplex route for the same chain LP (test oracle).

    Shifts ``f = g - 1`` with ``g in [0, 2]`` so the instance fits the
    nonnegative standard form, then maximizes.
    """
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    m = c.shape[0]
    n_rows = m + 2 * (m - 1)
    A = np.zeros((n_rows, m))
    b = np.zeros(n_rows)
    for i in range(m):
        A[i, i] = 1.0
        b[i] = 2.0
    r = m
    for i in range(m - 1):
        A[r, i + 1] = 1.0
        A[r, i] = -1.0
        b[r] = d[i]
        r += 1
        A[r, i] = 1.0
        A[r, i + 1] = -1.0
        b[r] = d[i]
        r += 1
    res = dense_simplex(c, A_ub=A, b_ub=b, maximize=True, tol=tol)
    return res.objective - float(np.sum(c))
