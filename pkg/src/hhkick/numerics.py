"""Numerical kernels: adaptive RKF45 integration, tangent propagation,
small dense linear algebra and Nelder-Mead minimization.

The integrators are numba-compiled and generic over the vector field.  A
field is any ``@njit`` function ``field(y, p, dy)`` that writes the
derivative of the state ``y`` into ``dy`` given a float64 parameter
vector ``p``.  Augmented systems (state plus tangent vectors) are plain
fields too; ``n_ctrl`` selects how many leading components take part in
step-size control.
"""
from __future__ import annotations

import functools
import math
import types
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit


class IntegrationError(RuntimeError):
    """Base class for integrator failures."""


class StepUnderflow(IntegrationError):
    pass


class NonFiniteState(IntegrationError):
    pass


class NoConvergence(RuntimeError):
    pass


class MaxIterExceeded(RuntimeError):
    """Raised by :func:`nelder_mead`; carries the best point found so far."""

    def __init__(self, msg, x, fx):
        super().__init__(msg)
        self.x = x
        self.fx = fx


@dataclass(frozen=True)
class IntegratorConfig:
    abs_tolerance: float = 1e-6
    initial_step: float = 1e-3
    max_step: float = 0.5
    min_step: float = 1e-12

    def __post_init__(self):
        if not self.abs_tolerance > 0:
            raise ValueError("abs_tolerance must be positive")
        if not (0 < self.min_step <= self.initial_step <= self.max_step):
            raise ValueError("need 0 < min_step <= initial_step <= max_step")

    def as_tuple(self):
        return (self.abs_tolerance, self.initial_step, self.max_step, self.min_step)


DEFAULT_CONFIG = IntegratorConfig()

# status codes returned by the compiled kernels
OK = 0
UNDERFLOW = 1
NONFINITE = 2
BUDGET = 3


def raise_for_status(status: int, where: str = "integrate") -> None:
    if status == UNDERFLOW:
        raise StepUnderflow(f"{where}: step size fell below min_step")
    if status == NONFINITE:
        raise NonFiniteState(f"{where}: state became non-finite")
    if status == BUDGET:
        raise IntegrationError(f"{where}: step budget exhausted")


# Fehlberg 4(5) tableau
_C2, _C3, _C4, _C5, _C6 = 0.25, 3.0 / 8.0, 12.0 / 13.0, 1.0, 0.5
_A21 = 0.25
_A31, _A32 = 3.0 / 32.0, 9.0 / 32.0
_A41, _A42, _A43 = 1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0
_A51, _A52, _A53, _A54 = 439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0
_A61, _A62, _A63, _A64, _A65 = -8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0
# 5th order weights (propagated)
_B1, _B3, _B4, _B5, _B6 = 16.0 / 135.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0
# difference between 5th and 4th order weights
_E1, _E3, _E4, _E5, _E6 = 1.0 / 360.0, -128.0 / 4275.0, -2197.0 / 75240.0, 1.0 / 50.0, 2.0 / 55.0


@njit(cache=True)
def _rkf45_attempt(field, p, y, h, k, ytmp, ynew, n_ctrl):
    """One trial step from ``y`` (with ``k[0]`` = field(y) already set).

    Writes the 5th-order solution to ``ynew`` and returns the sup-norm of
    the embedded error estimate over the first ``n_ctrl`` components.
    """
    n = y.shape[0]
    k1, k2, k3, k4, k5, k6 = k[0], k[1], k[2], k[3], k[4], k[5]
    for i in range(n):
        ytmp[i] = y[i] + h * _A21 * k1[i]
    field(ytmp, p, k2)
    for i in range(n):
        ytmp[i] = y[i] + h * (_A31 * k1[i] + _A32 * k2[i])
    field(ytmp, p, k3)
    for i in range(n):
        ytmp[i] = y[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
    field(ytmp, p, k4)
    for i in range(n):
        ytmp[i] = y[i] + h * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i] + _A54 * k4[i])
    field(ytmp, p, k5)
    for i in range(n):
        ytmp[i] = y[i] + h * (_A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i]
                              + _A64 * k4[i] + _A65 * k5[i])
    field(ytmp, p, k6)
    err = 0.0
    for i in range(n):
        ynew[i] = y[i] + h * (_B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i]
                              + _B5 * k5[i] + _B6 * k6[i])
        if i < n_ctrl:
            e = abs(h * (_E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i] + _E6 * k6[i]))
            if not (e <= err):  # also catches nan
                err = e
    return err


@njit(cache=True)
def _next_step(h, err, tol):
    if err == 0.0:
        return 5.0 * h
    fac = 0.9 * (tol / err) ** 0.2
    if fac > 5.0:
        fac = 5.0
    elif fac < 0.2:
        fac = 0.2
    return h * fac


@njit(cache=True)
def rkf45(field, p, y0, t_end, tol, h0, hmax, hmin, n_ctrl):
    """Integrate ``field`` from ``y0`` over ``[0, t_end]``.

    Returns ``(y, h_suggest, n_steps, status)``; the final step is
    truncated so the solution lands exactly on ``t_end``.
    """
    n = y0.shape[0]
    y = y0.copy()
    ynew = np.empty(n)
    ytmp = np.empty(n)
    k = np.empty((6, n))
    t = 0.0
    h = min(h0, hmax)
    h_suggest = h
    steps = 0
    if t_end <= 0.0:
        return y, h_suggest, steps, 0
    field(y, p, k[0])
    while t < t_end:
        last = False
        if t + h >= t_end:
            h_try = t_end - t
            last = True
        else:
            h_try = h
        err = _rkf45_attempt(field, p, y, h_try, k, ytmp, ynew, n_ctrl)
        if not math.isfinite(err):
            h = 0.25 * h_try
            if h < hmin:
                return y, h, steps, 2
            continue
        if err <= tol:
            t = t_end if last else t + h_try
            for i in range(n):
                y[i] = ynew[i]
            steps += 1
            field(y, p, k[0])
            for i in range(n):
                if not math.isfinite(k[0][i]):
                    return y, h, steps, 2
            h_new = min(_next_step(h_try, err, tol), hmax)
            if not last:
                h = h_new
                h_suggest = h_new
            elif h_try >= h:
                h_suggest = h_new
        else:
            h = max(_next_step(h_try, err, tol), 0.1 * h_try)
            if h < hmin:
                return y, h, steps, 1
    return y, h_suggest, steps, 0


@njit(cache=True)
def rkf45_record(field, p, y0, t_end, tol, h0, hmax, hmin, n_ctrl, max_steps):
    """Like :func:`rkf45` but also returns every accepted step.

    Returns ``(ts, ys, dys, status)`` where row ``j`` of ``ys`` is the
    state at ``ts[j]`` and ``dys[j]`` the field there (row 0 is the
    initial point).  The derivatives allow cubic Hermite interpolation
    inside each step.
    """
    n = y0.shape[0]
    ts = np.empty(max_steps + 1)
    ys = np.empty((max_steps + 1, n))
    dys = np.empty((max_steps + 1, n))
    y = y0.copy()
    ynew = np.empty(n)
    ytmp = np.empty(n)
    k = np.empty((6, n))
    t = 0.0
    h = min(h0, hmax)
    field(y, p, k[0])
    ts[0] = 0.0
    ys[0] = y
    dys[0] = k[0]
    j = 0
    while t < t_end:
        if j >= max_steps:
            return ts[: j + 1], ys[: j + 1], dys[: j + 1], 3
        last = False
        if t + h >= t_end:
            h_try = t_end - t
            last = True
        else:
            h_try = h
        err = _rkf45_attempt(field, p, y, h_try, k, ytmp, ynew, n_ctrl)
        if not math.isfinite(err):
            h = 0.25 * h_try
            if h < hmin:
                return ts[: j + 1], ys[: j + 1], dys[: j + 1], 2
            continue
        if err <= tol:
            t = t_end if last else t + h_try
            for i in range(n):
                y[i] = ynew[i]
            field(y, p, k[0])
            j += 1
            ts[j] = t
            ys[j] = y
            dys[j] = k[0]
            h = min(_next_step(h_try, err, tol), hmax)
        else:
            h = max(_next_step(h_try, err, tol), 0.1 * h_try)
            if h < hmin:
                return ts[: j + 1], ys[: j + 1], dys[: j + 1], 1
    return ts[: j + 1], ys[: j + 1], dys[: j + 1], 0


@njit(cache=True)
def rkf45_grid(field, p, y0, t_out, tol, h0, hmax, hmin, n_ctrl):
    """Integrate from t = 0 and return the state at each time in the
    increasing array ``t_out``; steps are truncated to land on every
    output time.  Returns ``(ys, status)``."""
    n = y0.shape[0]
    m = t_out.shape[0]
    ys = np.empty((m, n))
    y = y0.copy()
    t = 0.0
    h = h0
    for j in range(m):
        dt = t_out[j] - t
        if dt > 0.0:
            y, h, _, status = rkf45(field, p, y, dt, tol, h, hmax, hmin, n_ctrl)
            if status != 0:
                return ys[:j], status
            t = t_out[j]
        ys[j] = y
    return ys, 0


@njit(cache=True)
def hermite(t0, y0, f0, t1, y1, f1, t):
    """Cubic Hermite interpolant on one step, evaluated at ``t``."""
    h = t1 - t0
    s = (t - t0) / h
    s2 = s * s
    s3 = s2 * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


# ---------------------------------------------------------------------------
# Python-facing wrappers


# Uncached twins of the field-taking kernels.  Compiled specializations are
# keyed by the field's dispatcher type; persisting one keyed by a closure
# (or any dispatcher that is not itself disk-cached) leaves an entry that
# later processes cannot re-serialize, so such fields never touch the
# on-disk cache.
def _uncached_twins():
    g = dict(globals())
    out = {}
    for name in ("_rkf45_attempt", "_next_step", "rkf45", "rkf45_record"):
        py = globals()[name].py_func
        fn = types.FunctionType(py.__code__, g, py.__name__, py.__defaults__, py.__closure__)
        out[name] = g[name] = njit(fn)
    return out["rkf45"], out["rkf45_record"]


_rkf45_nc, _rkf45_record_nc = _uncached_twins()


def _kernels(field):
    if type(getattr(field, "_cache", None)).__name__ == "NullCache":
        return _rkf45_nc, _rkf45_record_nc
    return rkf45, rkf45_record


def integrate(field, x0, t_end, cfg: IntegratorConfig = DEFAULT_CONFIG, p=None,
              callback: Callable | None = None, n_ctrl: int | None = None):
    """Integrate a compiled vector field for ``t_end`` time units.

    ``callback(t, y)`` is invoked for every accepted step (including the
    initial point) when given.
    """
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    y0 = np.asarray(x0, dtype=np.float64)
    p = np.zeros(1) if p is None else np.asarray(p, dtype=np.float64)
    nc = y0.shape[0] if n_ctrl is None else n_ctrl
    tol, h0, hmax, hmin = cfg.as_tuple()
    step, record = _kernels(field)
    if callback is None:
        y, _, _, status = step(field, p, y0, float(t_end), tol, h0, hmax, hmin, nc)
        raise_for_status(status)
        return y
    ts, ys, _, status = record(field, p, y0, float(t_end), tol, h0, hmax, hmin, nc,
                                     _step_budget(t_end, cfg))
    raise_for_status(status)
    for t, y in zip(ts, ys):
        callback(t, y)
    return ys[-1].copy()


def _step_budget(t_end, cfg):
    return int(min(5e7, 1000 + 2000 * t_end))


@functools.lru_cache(maxsize=None)
def make_tangent_field(field, jacobian):
    """Build the augmented field ``(x, w) -> (f(x), Df(x) w)``.

    Memoized: one compiled closure per (field, jacobian) pair.  Keeping
    the closures alive also matters for numba's on-disk cache, whose
    index cannot be re-serialized once a dispatcher it refers to has
    been garbage-collected.
    """

    @njit
    def tangent_field(y, p, dy):
        n = y.shape[0] // 2
        x = y[:n]
        field(x, p, dy[:n])
        J = jacobian(x, p)
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += J[i, j] * y[n + j]
            dy[n + i] = s

    return tangent_field


def integrate_with_tangent(field, jacobian, x0, w0, t_end, cfg: IntegratorConfig = DEFAULT_CONFIG,
                           p=None, tangent_field=None):
    """Return ``(phi_t(x0), Dphi_t(x0) w0)``.

    The tangent rides along in the same accepted steps as the base state;
    only the base state enters error control.  ``tangent_field`` may be
    passed to reuse a precompiled augmented field.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    w0 = np.asarray(w0, dtype=np.float64)
    n = x0.shape[0]
    tf = tangent_field if tangent_field is not None else make_tangent_field(field, jacobian)
    y = integrate(tf, np.concatenate([x0, w0]), t_end, cfg, p=p, n_ctrl=n)
    return y[:n], y[n:]


# ---------------------------------------------------------------------------
# 4x4 linear algebra


def _hessenberg(A):
    """Householder reduction to upper Hessenberg form."""
    H = np.array(A, dtype=np.float64)
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k].copy()
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        if x[0] > 0:
            alpha = -alpha
        v = x
        v[0] -= alpha
        vn = np.linalg.norm(v)
        if vn == 0.0:
            continue
        v /= vn
        H[k + 1:, :] -= 2.0 * np.outer(v, v @ H[k + 1:, :])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
    return H


def _eig2(a, b, c, d):
    tr = a + d
    det = a * d - b * c
    disc = 0.25 * tr * tr - det
    if disc >= 0:
        r = math.sqrt(disc)
        # avoid cancellation
        big = 0.5 * tr + (r if tr >= 0 else -r)
        small = det / big if big != 0 else 0.5 * tr - (r if tr >= 0 else -r)
        return complex(big), complex(small)
    r = math.sqrt(-disc)
    return complex(0.5 * tr, r), complex(0.5 * tr, -r)


def eigenvalues4(M, max_iter: int = 500):
    """Eigenvalues of a small real matrix by Hessenberg reduction and
    Francis double-shift QR.  Returned unordered as a complex array."""
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    H = _hessenberg(M)
    n = H.shape[0]
    eigs: list[complex] = []
    hi = n - 1
    it = 0
    scale = max(np.abs(M).max(), 1e-300)
    while hi >= 0:
        if hi == 0:
            eigs.append(complex(H[0, 0]))
            break
        # find small subdiagonal
        lo = hi
        while lo > 0:
            s = abs(H[lo - 1, lo - 1]) + abs(H[lo, lo])
            if s == 0.0:
                s = scale
            if abs(H[lo, lo - 1]) < 1e-15 * s:
                H[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            eigs.append(complex(H[hi, hi]))
            hi -= 1
            it = 0
            continue
        if lo == hi - 1:
            eigs.extend(_eig2(H[hi - 1, hi - 1], H[hi - 1, hi], H[hi, hi - 1], H[hi, hi]))
            hi -= 2
            it = 0
            continue
        it += 1
        if it > max_iter:
            raise NoConvergence("QR iteration did not converge")
        # Francis double shift on the active block H[lo:hi+1, lo:hi+1]
        a, b, c, d = H[hi - 1, hi - 1], H[hi - 1, hi], H[hi, hi - 1], H[hi, hi]
        s = a + d
        t = a * d - b * c
        if it % 11 == 0:
            # exceptional shift
            w = abs(H[hi, hi - 1]) + abs(H[hi - 1, hi - 2])
            s, t = 1.5 * w, w * w
        x = H[lo, lo] ** 2 + H[lo, lo + 1] * H[lo + 1, lo] - s * H[lo, lo] + t
        y = H[lo + 1, lo] * (H[lo, lo] + H[lo + 1, lo + 1] - s)
        z = H[lo + 1, lo] * H[lo + 2, lo + 1]
        for k in range(lo, hi - 1):
            v = np.array([x, y, z])
            _apply_householder(H, v, k, lo, hi)
            x = H[k + 1, k]
            y = H[k + 2, k]
            if k < hi - 2:
                z = H[k + 3, k]
        v = np.array([x, y])
        _apply_householder(H, v, hi - 1, lo, hi)
    return np.array(eigs, dtype=complex)


def _apply_householder(H, v, k, lo, hi):
    m = v.shape[0]
    alpha = np.linalg.norm(v)
    if alpha == 0.0:
        return
    if v[0] > 0:
        alpha = -alpha
    u = v.copy()
    u[0] -= alpha
    un = np.linalg.norm(u)
    if un == 0.0:
        return
    u /= un
    r = slice(k, k + m)
    c0 = max(lo, k - 1)
    H[r, c0:hi + 1] -= 2.0 * np.outer(u, u @ H[r, c0:hi + 1])
    rmax = min(k + m + 1, hi + 1)
    H[lo:rmax, r] -= 2.0 * np.outer(H[lo:rmax, r] @ u, u)


def svd4(M, tol: float = 1e-15, max_sweeps: int = 60):
    """Singular value decomposition by one-sided Jacobi rotations.

    Returns ``(sigma, U, V)`` with ``sigma`` descending and
    ``M = U @ diag(sigma) @ V.T``.
    """
    A = np.array(M, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    n = A.shape[1]
    V = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = A[:, i] @ A[:, i]
                b = A[:, j] @ A[:, j]
                g = A[:, i] @ A[:, j]
                if abs(g) <= tol * math.sqrt(a * b) or g == 0.0:
                    continue
                rotated = True
                zeta = (b - a) / (2.0 * g)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                Ai, Aj = A[:, i].copy(), A[:, j].copy()
                A[:, i] = c * Ai - s * Aj
                A[:, j] = s * Ai + c * Aj
                Vi, Vj = V[:, i].copy(), V[:, j].copy()
                V[:, i] = c * Vi - s * Vj
                V[:, j] = s * Vi + c * Vj
        if not rotated:
            break
    sigma = np.sqrt(np.einsum("ij,ij->j", A, A))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    A = A[:, order]
    V = V[:, order]
    U = np.zeros_like(A)
    for j in range(n):
        if sigma[j] > 1e-300 and sigma[j] > sigma[0] * 1e-300:
            U[:, j] = A[:, j] / sigma[j]
    U = _complete_orthonormal(U, sigma)
    return sigma, U, V


def _complete_orthonormal(U, sigma):
    """Fill columns belonging to zero singular values with an orthonormal
    completion, so U stays orthogonal for rank-deficient input."""
    n = U.shape[1]
    cols = [U[:, j] for j in range(n) if sigma[j] > 0 and np.linalg.norm(U[:, j]) > 0.5]
    basis = list(cols)
    for e in np.eye(U.shape[0]):
        if len(basis) == n:
            break
        v = e.copy()
        for q in basis:
            v -= (q @ v) * q
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            basis.append(v / nv)
    out = U.copy()
    extra = iter(basis[len(cols):])
    for j in range(n):
        if not (sigma[j] > 0 and np.linalg.norm(U[:, j]) > 0.5):
            out[:, j] = next(extra)
    return out


# ---------------------------------------------------------------------------
# Nelder-Mead


def nelder_mead(f, simplex, tol: float = 1e-8, max_iter: int = 2000, raise_on_max_iter=True):
    """Minimize ``f`` starting from ``simplex`` (k+1 vertices in R^k).

    Standard reflection/expansion/contraction/shrink coefficients
    (1, 2, 1/2, 1/2).  Stops when the simplex diameter drops below
    ``tol``.  Returns ``(x_best, f_best)``.
    """
    pts = np.array(simplex, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    k = pts.shape[1]
    if pts.shape[0] != k + 1:
        raise ValueError("simplex must have k+1 vertices")
    vals = np.array([f(x) for x in pts], dtype=np.float64)
    for _ in range(max_iter):
        order = np.argsort(vals, kind="stable")
        pts, vals = pts[order], vals[order]
        diam = max(np.max(np.abs(pts[i] - pts[0])) for i in range(1, k + 1))
        if diam < tol:
            return pts[0].copy(), float(vals[0])
        centroid = pts[:-1].mean(axis=0)
        xr = centroid + (centroid - pts[-1])
        fr = f(xr)
        if fr < vals[0]:
            xe = centroid + 2.0 * (centroid - pts[-1])
            fe = f(xe)
            if fe < fr:
                pts[-1], vals[-1] = xe, fe
            else:
                pts[-1], vals[-1] = xr, fr
        elif fr < vals[-2]:
            pts[-1], vals[-1] = xr, fr
        else:
            if fr < vals[-1]:
                xc = centroid + 0.5 * (xr - centroid)
                fc = f(xc)
                accept = fc <= fr
            else:
                xc = centroid + 0.5 * (pts[-1] - centroid)
                fc = f(xc)
                accept = fc < vals[-1]
            if accept:
                pts[-1], vals[-1] = xc, fc
            else:
                for i in range(1, k + 1):
                    pts[i] = pts[0] + 0.5 * (pts[i] - pts[0])
                    vals[i] = f(pts[i])
    best = int(np.argmin(vals))
    if raise_on_max_iter:
        raise MaxIterExceeded("nelder_mead: max_iter reached", pts[best].copy(), float(vals[best]))
    return pts[best].copy(), float(vals[best])
