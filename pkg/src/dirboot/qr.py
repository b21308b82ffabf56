"""Weighted linear quantile regression via a long-step vertex walk.

The check-function problem ``min_b sum_i w_i rho_tau(y_i - x_i'b)`` is a
linear program whose vertices interpolate exactly ``p`` observations.  The
solver walks vertex to vertex: at the current basis it prices the two edge
directions of every basic row from the aggregated subgradient of the
non-interpolated rows, picks the steepest descending edge, and takes the
longest step along it (a weighted-median line search over the residual
breakpoints, crossing many of them per pivot).  This is orders of magnitude
faster than a dense tableau and supports warm starts: a previous basis is a
valid starting vertex whenever the design matrix is unchanged — which is
exactly the situation across neighboring quantile levels and across
bootstrap reweightings.

``qr_lp_reference`` solves the same instance through the shared dense
simplex (residual-split formulation) and is the test oracle for this module.
"""

from __future__ import annotations

import logging

import numpy as np
from numba import njit

from .lp import dense_simplex

_LOG = logging.getLogger(__name__)

__all__ = [
    "QRSolveError",
    "qr_objective",
    "solve_weighted_qr",
    "solve_qr_path",
    "qr_lp_reference",
    "negative_residual_count",
]

_STATUS_OK = 0
_STATUS_RANK = 1
_STATUS_UNBOUNDED = 2
_STATUS_MAXITER = 3

_STATUS_MESSAGES = {
    _STATUS_RANK: "design matrix is rank deficient on this (weighted) sample",
    _STATUS_UNBOUNDED: "objective is unbounded along an edge (degenerate weights)",
    _STATUS_MAXITER: "vertex walk exceeded its iteration cap",
}


class QRSolveError(RuntimeError):
    """Raised when a quantile-regression fit cannot be completed."""


@njit(cache=True, nogil=True)
def _refresh_state(X, y, H, Xinv, b, r):  # pragma: no cover - numba
    """Recompute the inverse basis, coefficients and residuals exactly."""
    p = H.shape[0]
    XH = np.empty((p, p))
    yH = np.empty(p)
    for k in range(p):
        for j in range(p):
            XH[k, j] = X[H[k], j]
        yH[k] = y[H[k]]
    det_ok = True
    # explicit inverse via Gauss-Jordan with partial pivoting
    A = XH.copy()
    Inv = np.eye(p)
    for col in range(p):
        piv = col
        best = abs(A[col, col])
        for rr in range(col + 1, p):
            if abs(A[rr, col]) > best:
                best = abs(A[rr, col])
                piv = rr
        if best < 1e-12:
            det_ok = False
            break
        if piv != col:
            for j in range(p):
                tmp = A[col, j]
                A[col, j] = A[piv, j]
                A[piv, j] = tmp
                tmp = Inv[col, j]
                Inv[col, j] = Inv[piv, j]
                Inv[piv, j] = tmp
        pivval = A[col, col]
        for j in range(p):
            A[col, j] /= pivval
            Inv[col, j] /= pivval
        for rr in range(p):
            if rr != col and A[rr, col] != 0.0:
                f = A[rr, col]
                for j in range(p):
                    A[rr, j] -= f * A[col, j]
                    Inv[rr, j] -= f * Inv[col, j]
    if not det_ok:
        return False
    for i in range(p):
        for j in range(p):
            Xinv[i, j] = Inv[i, j]
    # b = Xinv @ yH
    for i in range(p):
        s = 0.0
        for k in range(p):
            s += Xinv[i, k] * yH[k]
        b[i] = s
    n = X.shape[0]
    for i in range(n):
        s = y[i]
        for j in range(p):
            s -= X[i, j] * b[j]
        r[i] = s
    for k in range(p):
        r[H[k]] = 0.0
    return True


@njit(cache=True, nogil=True)
def _cold_basis(X, y, w, H):  # pragma: no cover - numba
    """Pick p independent rows with small weighted-LS residuals as a start."""
    n, p = X.shape
    # weighted least squares through the normal equations (+ tiny ridge)
    G = np.zeros((p, p))
    g = np.zeros(p)
    for i in range(n):
        wi = w[i] if w[i] > 0.0 else 1e-3
        for a in range(p):
            xa = X[i, a]
            g[a] += wi * xa * y[i]
            for c in range(p):
                G[a, c] += wi * xa * X[i, c]
    for a in range(p):
        G[a, a] += 1e-10 * (1.0 + G[a, a])
    b0 = np.linalg.solve(G, g)
    resid = np.empty(n)
    for i in range(n):
        s = y[i]
        for j in range(p):
            s -= X[i, j] * b0[j]
        resid[i] = abs(s)
    order = np.argsort(resid)
    # greedy Gaussian elimination over candidate rows to ensure independence
    basis_rows = np.empty((p, p))
    count = 0
    for pos in range(n):
        i = order[pos]
        for j in range(p):
            basis_rows[count, j] = X[i, j]
        # eliminate against previously accepted rows
        row = basis_rows[count]
        for k in range(count):
            f = 0.0
            lead = -1
            for j in range(p):
                if abs(basis_rows[k, j]) > 1e-12:
                    lead = j
                    break
            if lead >= 0:
                f = row[lead] / basis_rows[k, lead]
                for j in range(p):
                    row[j] -= f * basis_rows[k, j]
        norm = 0.0
        for j in range(p):
            norm += abs(row[j])
        if norm > 1e-8:
            H[count] = i
            count += 1
            if count == p:
                return True
    return False


@njit(cache=True, nogil=True)
def _qr_walk(X, y, w, tau, H, Xinv, b, r, in_basis,
             max_iter, tol_slope):  # pragma: no cover - numba
    """Long-step vertex walk to optimality.  Returns (status, iterations)."""
    n, p = X.shape
    a = np.empty(n)
    sk = np.empty(n)
    jk = np.empty(n)
    rows = np.empty(n, dtype=np.int64)
    v = np.empty(p)
    stall = 0
    bland = False
    refresh_countdown = 60

    # a start interpolating every positive-weight row is already optimal
    # (objective zero); the pricing loop below would spin on the massive
    # degeneracy instead of certifying it
    all_zero = True
    for i in range(n):
        if w[i] > 0.0 and r[i] != 0.0:
            all_zero = False
            break
    if all_zero:
        return _STATUS_OK, 0

    it = 0
    while it < max_iter:
        it += 1
        refresh_countdown -= 1
        if refresh_countdown <= 0:
            if not _refresh_state(X, y, H, Xinv, b, r):
                return _STATUS_RANK, it
            refresh_countdown = 60
        # aggregate subgradient of non-basic rows
        for j in range(p):
            v[j] = 0.0
        for i in range(n):
            if in_basis[i] or w[i] == 0.0:
                continue
            psi = tau - 1.0 if r[i] < 0.0 else tau
            wpsi = w[i] * psi
            for j in range(p):
                v[j] += wpsi * X[i, j]
        # price the 2p edges
        best_slope = -tol_slope
        best_k = -1
        best_sigma = 1.0
        for k in range(p):
            uk = 0.0
            for j in range(p):
                uk -= Xinv[j, k] * v[j]
            wk = w[H[k]]
            gplus = uk + (1.0 - tau) * wk
            gminus = -uk + tau * wk
            if bland:
                # anti-stall: first descending edge by basis position
                if gplus < -tol_slope:
                    best_slope = gplus
                    best_k = k
                    best_sigma = 1.0
                    break
                if gminus < -tol_slope:
                    best_slope = gminus
                    best_k = k
                    best_sigma = -1.0
                    break
            else:
                if gplus < best_slope:
                    best_slope = gplus
                    best_k = k
                    best_sigma = 1.0
                if gminus < best_slope:
                    best_slope = gminus
                    best_k = k
                    best_sigma = -1.0
        if best_k < 0:
            return _STATUS_OK, it
        # direction: residual velocity a_i = sigma * x_i' delta_k
        for i in range(n):
            s = 0.0
            for j in range(p):
                s += X[i, j] * Xinv[j, best_k]
            a[i] = best_sigma * s
        # breakpoints where a residual reaches zero while moving downhill
        # (zero-weight rows add no slope and may not enter the basis)
        m = 0
        for i in range(n):
            if in_basis[i] or w[i] == 0.0:
                continue
            ai = a[i]
            if ai == 0.0:
                continue
            ri = r[i]
            if ri == 0.0:
                if ai > 0.0:  # kink crossed immediately
                    sk[m] = 0.0
                    jk[m] = w[i] * ai
                    rows[m] = i
                    m += 1
            elif (ri > 0.0 and ai > 0.0) or (ri < 0.0 and ai < 0.0):
                sk[m] = ri / ai
                jk[m] = w[i] * (ai if ai > 0.0 else -ai)
                rows[m] = i
                m += 1
        if m == 0:
            return _STATUS_UNBOUNDED, it
        order = np.argsort(sk[:m])
        slope = best_slope
        enter = -1
        step = 0.0
        for t in range(m):
            idx = order[t]
            slope += jk[idx]
            if slope >= 0.0:
                enter = rows[idx]
                step = sk[idx]
                break
        if enter < 0:
            return _STATUS_UNBOUNDED, it
        # move: b += step*sigma*delta_k, residuals shift by -step*a
        if step > 0.0:
            for j in range(p):
                b[j] += step * best_sigma * Xinv[j, best_k]
            for i in range(n):
                r[i] -= step * a[i]
            stall = 0
            bland = False
        else:
            stall += 1
            if stall > 2 * p + 10:
                bland = True
        leave = H[best_k]
        in_basis[leave] = False
        in_basis[enter] = True
        H[best_k] = enter
        r[leave] = -step * best_sigma
        r[enter] = 0.0
        for kk in range(p):
            r[H[kk]] = 0.0
        # rank-one update of the inverse basis for the row replacement
        q = np.empty(p)
        for j in range(p):
            s = 0.0
            for c in range(p):
                s += X[enter, c] * Xinv[c, j]
            q[j] = s
        qk = q[best_k]  # = x_enter' delta_k, nonzero for a crossing row
        if abs(qk) < 1e-11:
            if not _refresh_state(X, y, H, Xinv, b, r):
                return _STATUS_RANK, it
            refresh_countdown = 60
            continue
        for i in range(p):
            dk = Xinv[i, best_k]
            if dk == 0.0:
                continue
            f = dk / qk
            for j in range(p):
                adj = q[j]
                if j == best_k:
                    adj -= 1.0
                Xinv[i, j] -= f * adj
    return _STATUS_MAXITER, it


@njit(cache=True, nogil=True)
def _path_kernel(X, y, w, taus, bases, warm, coefs, objs,
                 iters, statuses, max_iter, tol_slope):  # pragma: no cover - numba
    """Fit every quantile level, reusing bases; fills a per-level status.

    ``bases`` is (T, p): on input the warm bases if ``warm``; on output the
    optimal bases.  Levels chain when cold: level t starts from t-1's basis.
    A rank failure aborts the whole path (nothing downstream can recover);
    an iteration-cap or unbounded-edge failure is recorded for that level
    only — the walk's last vertex is still a valid basis, so later levels
    keep chaining and the caller can re-solve the flagged level.
    """
    n, p = X.shape
    T = taus.shape[0]
    Xinv = np.empty((p, p))
    b = np.empty(p)
    r = np.empty(n)
    in_basis = np.zeros(n, dtype=np.bool_)
    H = np.empty(p, dtype=np.int64)
    have_prev = False
    for t in range(T):
        if warm:
            for k in range(p):
                H[k] = bases[t, k]
        elif have_prev:
            pass  # keep H from the previous level
        else:
            if not _cold_basis(X, y, w, H):
                statuses[t] = _STATUS_RANK
                return
        if not _refresh_state(X, y, H, Xinv, b, r):
            statuses[t] = _STATUS_RANK
            return
        for i in range(n):
            in_basis[i] = False
        for k in range(p):
            in_basis[H[k]] = True
        status, it = _qr_walk(X, y, w, taus[t], H, Xinv, b, r, in_basis,
                              max_iter, tol_slope)
        statuses[t] = status
        if status == _STATUS_RANK:
            return
        have_prev = True
        iters[t] = it
        for j in range(p):
            coefs[t, j] = b[j]
            bases[t, j] = H[j]
        obj = 0.0
        for i in range(n):
            if w[i] == 0.0:
                continue
            ri = r[i]
            if ri < 0.0:
                obj += w[i] * (taus[t] - 1.0) * ri
            else:
                obj += w[i] * taus[t] * ri
        objs[t] = obj


def _independent_interpolated_rows(X, beta, y):
    """Greedy search for p linearly independent zero-residual rows.

    Used to rebuild a warm-startable basis after a dense-simplex repair;
    returns None when the solution does not interpolate p independent rows.
    """
    n, p = X.shape
    resid = np.abs(y - X @ beta)
    scale = max(1.0, float(np.max(np.abs(y)))) if n else 1.0
    candidates = np.flatnonzero(resid <= 1e-8 * scale)
    if candidates.size < p:
        return None
    chosen: list[int] = []
    basis_dirs = np.empty((p, p))
    for i in candidates:
        row = X[i].astype(float)
        v = row.copy()
        for j in range(len(chosen)):
            v -= (v @ basis_dirs[j]) * basis_dirs[j]
        norm = float(np.linalg.norm(v))
        if norm > 1e-8 * max(1.0, float(np.linalg.norm(row))):
            basis_dirs[len(chosen)] = v / norm
            chosen.append(int(i))
            if len(chosen) == p:
                return np.asarray(chosen, dtype=np.int64)
    return None


def _finish_path(X, y, w, taus, coefs, objs, bases, statuses) -> None:
    """Post-process kernel output: raise on rank loss, re-solve stalls.

    A level flagged as iteration-capped or unbounded sits at a valid but
    possibly suboptimal vertex (this only happens on heavily tied data,
    where massive degeneracy can stall the walk).  The dense simplex is
    slower but immune to that, so it repairs just those levels in place,
    and the recorded basis is rebuilt from the repaired solution whenever
    it interpolates p independent rows, keeping warm restarts cheap.
    """
    if np.any(statuses == _STATUS_RANK):
        raise QRSolveError(_STATUS_MESSAGES[_STATUS_RANK])
    for k in np.flatnonzero(statuses != _STATUS_OK):
        status = int(statuses[k])
        try:
            beta, obj = qr_lp_reference(X, y, float(taus[k]), weights=w)
        except Exception as exc:
            raise QRSolveError(_STATUS_MESSAGES[status]) from exc
        coefs[k] = beta
        objs[k] = obj
        recovered = _independent_interpolated_rows(X, beta, y)
        if recovered is not None:
            bases[k] = recovered
        _LOG.warning(
            "vertex walk stalled at level %.6g (%s); dense-simplex fallback "
            "re-solved it (objective %.6g)",
            float(taus[k]), _STATUS_MESSAGES[status], obj,
        )


def qr_objective(X, y, w, tau, beta) -> float:
    """Weighted check-function objective at coefficients ``beta``."""
    r = y - X @ beta
    psi = np.where(r < 0, tau - 1.0, tau)
    return float(np.sum(w * psi * r))


def _validated(X, y, weights):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, p) and y (n,) with matching n")
    n, p = X.shape
    if n < p:
        raise QRSolveError("fewer observations than regressors")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.shape != y.shape:
            raise ValueError("weights must have shape (n,)")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if not np.any(w > 0):
            raise QRSolveError("all weights are zero")
    return X, y, w


def solve_weighted_qr(X, y, tau: float, weights=None, warm_basis=None,
                      max_iter: int = 0):
    """One weighted quantile-regression fit.

    Returns ``(beta, objective, basis, iterations)``.  ``warm_basis`` is a
    length-p integer array of row indices forming an invertible submatrix
    (e.g. the optimal basis of a neighboring fit).
    """
    X, y, w = _validated(X, y, weights)
    n, p = X.shape
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    taus = np.array([float(tau)])
    bases = np.zeros((1, p), dtype=np.int64)
    warm = warm_basis is not None
    if warm:
        wb = np.asarray(warm_basis, dtype=np.int64)
        if wb.shape != (p,):
            raise ValueError("warm basis must have shape (p,)")
        bases[0] = wb
    coefs = np.empty((1, p))
    objs = np.empty(1)
    iters = np.zeros(1, dtype=np.int64)
    if max_iter <= 0:
        max_iter = 1000 + 20 * n
    tol_slope = 1e-10 * max(1.0, float(np.sqrt(np.sum(w * w))))
    statuses = np.full(1, _STATUS_OK, dtype=np.int64)
    _path_kernel(X, y, w, taus, bases, warm, coefs, objs, iters, statuses,
                 max_iter, tol_slope)
    _finish_path(X, y, w, taus, coefs, objs, bases, statuses)
    return coefs[0], float(objs[0]), bases[0].copy(), int(iters[0])


def solve_qr_path(X, y, taus, weights=None, warm_bases=None,
                  max_iter: int = 0):
    """Fit a whole grid of quantile levels.

    Without ``warm_bases``, level ``t`` warm-starts from level ``t-1``
    (parametric chaining); with it, every level starts from the supplied
    basis — the right choice for bootstrap refits, where the design is
    unchanged and only weights moved.  Returns ``(coefs (T,p), objectives
    (T,), bases (T,p), iterations (T,))``.
    """
    X, y, w = _validated(X, y, weights)
    n, p = X.shape
    taus = np.ascontiguousarray(taus, dtype=np.float64)
    if taus.ndim != 1 or taus.size == 0:
        raise ValueError("taus must be a nonempty 1-d array")
    if np.any(taus <= 0) or np.any(taus >= 1):
        raise ValueError("quantile levels must lie in (0, 1)")
    T = taus.shape[0]
    bases = np.zeros((T, p), dtype=np.int64)
    warm = warm_bases is not None
    if warm:
        wb = np.asarray(warm_bases, dtype=np.int64)
        if wb.shape != (T, p):
            raise ValueError("warm bases must have shape (T, p)")
        bases[:] = wb
    coefs = np.empty((T, p))
    objs = np.empty(T)
    iters = np.zeros(T, dtype=np.int64)
    if max_iter <= 0:
        max_iter = 1000 + 20 * n
    tol_slope = 1e-10 * max(1.0, float(np.sqrt(np.sum(w * w))))
    statuses = np.full(T, _STATUS_OK, dtype=np.int64)
    _path_kernel(X, y, w, taus, bases, warm, coefs, objs, iters, statuses,
                 max_iter, tol_slope)
    _finish_path(X, y, w, taus, coefs, objs, bases, statuses)
    return coefs, objs, bases, iters


def negative_residual_count(X, y, beta, tol: float = 1e-9) -> int:
    """Number of strictly negative residuals (optimality certificate input)."""
    r = y - X @ beta
    return int(np.sum(r < -tol))


def qr_lp_reference(X, y, tau: float, weights=None):
    """Reference solve through the dense simplex (residual-split LP).

    Variables ``(b+, b-, u, v) >= 0`` with ``X(b+ - b-) + u - v = y``;
    objective ``sum_i w_i (tau u_i + (1-tau) v_i)``.  Returns ``(beta,
    objective)``.  Small instances only — the tableau is dense.
    """
    X, y, w = _validated(X, y, weights)
    n, p = X.shape
    c = np.concatenate([np.zeros(2 * p), tau * w, (1.0 - tau) * w])
    A_eq = np.hstack([X, -X, np.eye(n), -np.eye(n)])
    res = dense_simplex(c, A_eq=A_eq, b_eq=y)
    beta = res.x[:p] - res.x[p:2 * p]
    return beta, res.objective
