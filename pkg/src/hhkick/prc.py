"""Finite phase-resetting curves and what can be read off them.

A curve is stored once in its T = 0 normal form ``f0``; the curve for
drive period ``T`` is the vertical shift ``f_T = f0 + T (mod T0)``.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .cycle import PHASE_CONFIG, LimitCycle, NotInBasin, _flow, asymptotic_phase, phase_gradient
from .forcing import KickSpec, kick
from .numerics import IntegratorConfig, MaxIterExceeded, NoConvergence, nelder_mead, rkf45
from .models import hh_rhs

NEAR = 1e-4          # neighbourhood of the cycle where the linear E_ss is trusted
ANGLE_TOL = 1e-3     # rad, membership test for E_ss(x*)
MAX_LEVELS = 20      # bisection depth per initial cell

FLAG_OK = "ok"
FLAG_NOT_IN_BASIN = "not_in_basin"
FLAG_FRONTIER = "frontier"


class GridBudgetExceeded(RuntimeWarning):
    """Refinement stopped at a cell that may contain a singularity."""


class NoMinimumInBracket(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# single-phase evaluation


def kicked_new_phase(theta: float, A: float, c: LimitCycle, cfg: IntegratorConfig = PHASE_CONFIG,
                     near: float = NEAR, max_periods: int = 200) -> tuple[float, float]:
    """T = 0 new phase of ``gamma(theta)`` after an impulse ``A``.

    Flows the kicked point until it is within ``near`` of the cycle, then
    finds the sample whose linear strong-stable subspace contains it.
    Returns ``(f0, elapsed)``.
    """
    pk = c.packed
    y = kick(c.point(theta), KickSpec(A))
    chunk = c.T0 / 8
    t = 0.0
    t_max = max_periods * c.T0
    while True:
        i = c.nearest_sample(y)
        if np.linalg.norm(y - c.states[i]) < 1.0:
            s, dist = c.project(y)
            if dist < near:
                theta_s, _ = c.project_ss(y, s)
                gp = c.point(theta_s)
                r = y - gp
                nr = np.linalg.norm(r)
                if nr == 0.0 or abs(c.normal(theta_s) @ r) / nr < ANGLE_TOL:
                    return float(np.mod(theta_s - t, c.T0)), t
        if t >= t_max:
            raise NotInBasin(f"kicked point at phase {theta:.6f} did not return within {max_periods} periods")
        y = _flow(y, chunk, pk, cfg)
        t += chunk


def direct_phase_oracle(theta: float, A: float, c: LimitCycle, n_periods: int = 10) -> float:
    """Independent f0 value: kick, flow ``n_periods`` periods, take the
    asymptotic phase and remove the elapsed time."""
    y = kick(c.point(theta), KickSpec(A))
    y = _flow(y, n_periods * c.T0, c.packed, PHASE_CONFIG)
    return float(np.mod(asymptotic_phase(y, c) - n_periods * c.T0, c.T0))


# ---------------------------------------------------------------------------
# curve container


def circ_diff(b, a, T0):
    """Representative of ``b - a`` in ``[-T0/2, T0/2)``."""
    return np.mod(np.asarray(b) - np.asarray(a) + T0 / 2, T0) - T0 / 2


@dataclass(frozen=True, eq=False)
class PRCurve:
    """Phase-resetting curve on an adaptively refined phase grid.

    ``values`` are ``f_T(grid) in [0, T0)``, ``lift`` the continuous lift on
    the grid (NaN where the point was lost), ``T`` the applied shift.
    """

    A: float
    T0: float
    grid: np.ndarray
    values: np.ndarray
    lift: np.ndarray
    winding: int
    delta: float
    flags: tuple
    frontier: tuple = ()
    T: float = 0.0

    @property
    def ok(self) -> np.ndarray:
        return np.array([f != FLAG_NOT_IN_BASIN for f in self.flags])

    def _valid(self):
        m = self.ok & np.isfinite(self.lift)
        return self.grid[m], self.lift[m]

    def lift_at(self, theta) -> np.ndarray:
        """Linear interpolation of the periodic extension of the lift."""
        g, L = self._valid()
        th = np.asarray(theta, dtype=np.float64)
        k = np.floor(th / self.T0)
        base = th - k * self.T0
        gx = np.concatenate([g, [g[0] + self.T0]])
        Lx = np.concatenate([L, [L[0] + self.winding * self.T0]])
        return np.interp(base, gx, Lx) + k * self.winding * self.T0

    def __call__(self, theta):
        return np.mod(self.lift_at(theta), self.T0)

    def max_gap(self, exclude_frontier: bool = True) -> float:
        g, L = self._valid()
        gaps = np.abs(np.diff(np.concatenate([L, [L[0] + self.winding * self.T0]])))
        if exclude_frontier and self.frontier:
            gx = np.concatenate([g, [g[0] + self.T0]])
            keep = np.ones(gaps.size, bool)
            for a, b in self.frontier:
                keep &= ~((gx[:-1] >= a - 1e-12) & (gx[1:] <= b + 1e-12))
            gaps = gaps[keep]
        return float(gaps.max()) if gaps.size else 0.0

    def frontier_length(self) -> float:
        return float(sum(b - a for a, b in self.frontier))

    def to_csv(self, path, header: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["theta", "f0_value", "lift_value", "flags"])
            base = shift_prc(self, -self.T)
            for th, v, L, fl in zip(base.grid, base.values, base.lift, base.flags):
                w.writerow([repr(float(th)), repr(float(v)), repr(float(L)), fl])


def _lift_and_winding(grid, values, ok, T0):
    lift = np.full(values.shape, np.nan)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return lift, 0
    v = values[idx]
    steps = circ_diff(v[1:], v[:-1], T0)
    lift[idx] = v[0] + np.concatenate([[0.0], np.cumsum(steps)])
    closing = circ_diff(v[0], v[-1], T0)
    total = (lift[idx[-1]] + closing) - lift[idx[0]]
    return lift, int(round(total / T0))


def _evaluate(thetas, A, c, jobs):
    tasks = [(th, A, c) for th in thetas]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_eval_task, tasks))
    return [_eval_task(t) for t in tasks]


def _eval_task(args):
    th, A, c = args
    try:
        return kicked_new_phase(th, A, c)[0], FLAG_OK
    except (NotInBasin, NoConvergence, RuntimeError):
        return math.nan, FLAG_NOT_IN_BASIN


def compute_prc(A: float, c: LimitCycle, delta: float = 0.1, n_initial: int = 128,
                max_levels: int = MAX_LEVELS, jobs: int = 1) -> PRCurve:
    """Phase-resetting curve ``f0`` of an impulse ``A``.

    The grid starts uniform and each cell is bisected until the circular
    gap between its endpoint values is at most ``delta``; cells still too
    wide after ``max_levels`` bisections are recorded in ``frontier``.
    Refinement proceeds in rounds whose new points are independent.
    """
    if c.frames is None:
        raise ValueError("cycle needs strong-stable frames")
    T0 = c.T0
    grid = list(np.arange(n_initial) * (T0 / n_initial))
    res = _evaluate(grid, A, c, jobs)
    vals = {th: r for th, r in zip(grid, res)}
    # cells: (left, right, level); the last one wraps around
    cells = [(grid[i], grid[i + 1] if i + 1 < n_initial else T0, 0) for i in range(n_initial)]
    frontier = []

    def value(th):
        return vals[th if th < T0 else 0.0][0]

    while cells:
        todo = []
        for a, b, lev in cells:
            fa, fb = value(a), value(b)
            if math.isnan(fa) or math.isnan(fb):
                gap = math.inf
            else:
                gap = abs(float(circ_diff(fb, fa, T0)))
            if gap <= delta:
                continue
            if lev >= max_levels:
                frontier.append((a, b))
                continue
            todo.append((a, b, lev))
        mids = [0.5 * (a + b) for a, b, _ in todo]
        for th, r in zip(mids, _evaluate(mids, A, c, jobs)):
            vals[th] = r
        cells = []
        for (a, b, lev), m in zip(todo, mids):
            cells.append((a, m, lev + 1))
            cells.append((m, b, lev + 1))

    g = np.array(sorted(vals))
    values = np.array([vals[t][0] for t in g])
    flags = [vals[t][1] for t in g]
    for a, b in frontier:
        for j in (np.searchsorted(g, a), np.searchsorted(g, b % T0)):
            j = j % len(g)
            if flags[j] == FLAG_OK:
                flags[j] = FLAG_FRONTIER
    ok = np.array([f != FLAG_NOT_IN_BASIN for f in flags])
    lift, winding = _lift_and_winding(g, values, ok, T0)
    # NaN-valued points (lost orbits) keep NaN lift; finite ones are mod-consistent
    values = np.where(ok, np.mod(lift, T0), np.nan)
    return PRCurve(float(A), T0, g, values, lift, winding, float(delta), tuple(flags),
                   tuple(sorted(frontier)), 0.0)


def shift_prc(prc: PRCurve, T: float) -> PRCurve:
    """``f_{T'+T}`` from ``f_{T'}``: values move by ``T mod T0``, the lift by ``T``."""
    lift = prc.lift + T
    return replace(prc, lift=lift, values=np.mod(lift, prc.T0), T=prc.T + T)


def prc_from_function(f0: Callable, T0: float, grid, delta: float = 0.1, A: float = math.nan) -> PRCurve:
    """Build a curve from a known map (tests and synthetic examples)."""
    g = np.asarray(grid, dtype=np.float64)
    v = np.mod(np.array([f0(t) for t in g], dtype=np.float64), T0)
    ok = np.ones(g.size, bool)
    lift, w = _lift_and_winding(g, v, ok, T0)
    return PRCurve(A, T0, g, np.mod(lift, T0), lift, w, delta, tuple([FLAG_OK] * g.size))


# ---------------------------------------------------------------------------
# first-return maps and plateau sinks


@dataclass(frozen=True, eq=False)
class ReturnMap:
    interval: tuple
    theta: np.ndarray
    image: np.ndarray
    count: np.ndarray
    no_return: np.ndarray

    def sinks(self, margin: float = 1e-6) -> list[tuple[float, float, int]]:
        """Diagonal crossings with ``|slope| < 1``: ``(theta, slope, count)``."""
        out = []
        th, R, q = self.theta, self.image, self.count
        a, b = self.interval
        span = b - a
        for i in range(th.size - 1):
            if q[i] != q[i + 1] or q[i] == 0:
                continue
            d0, d1 = R[i] - th[i], R[i + 1] - th[i + 1]
            if d0 == 0.0 and i > 0 and R[i - 1] - th[i - 1] != 0.0:
                continue  # counted with the previous pair
            if d0 * d1 > 0:
                continue
            dth = th[i + 1] - th[i]
            # R jumps across the interval at the ends of a return branch
            if abs(R[i + 1] - R[i]) > 0.5 * span:
                continue
            # local slope from the bracketing pair and same-branch neighbours
            lo, hi = i, i + 1
            if lo > 0 and q[lo - 1] == q[i] and abs(R[lo] - R[lo - 1]) < 0.5 * span:
                lo -= 1
            if hi < th.size - 1 and q[hi + 1] == q[i] and abs(R[hi + 1] - R[hi]) < 0.5 * span:
                hi += 1
            xs, ys = th[lo:hi + 1], R[lo:hi + 1]
            slope = float(np.polyfit(xs, ys, 1)[0]) if xs.size > 2 else float((R[i + 1] - R[i]) / dth)
            if abs(slope) < 1.0 - margin:
                x = th[i] - d0 * dth / (d1 - d0) if d1 != d0 else th[i]
                out.append((float(x), slope, int(q[i])))
        return out


def first_return_map(prc: PRCurve, T: float, interval=(4.0, 10.0), max_iter: int = 200,
                     points=None) -> ReturnMap:
    """First return of ``f_T`` (shifted from ``prc``) to ``[a, b]``.

    Evaluated at the curve's own grid points inside the interval (or at
    ``points``); orbits that have not come back within ``max_iter``
    iterates are marked in ``no_return``.
    """
    a, b = interval
    if not (0 <= a < b <= prc.T0):
        raise ValueError("interval must lie inside [0, T0)")
    f = shift_prc(prc, T)
    if points is None:
        g, _ = f._valid()
        th = g[(g >= a) & (g <= b)]
    else:
        th = np.asarray(points, dtype=np.float64)
    R = np.full(th.size, np.nan)
    q = np.zeros(th.size, dtype=int)
    x = th.copy()
    active = np.ones(th.size, bool)
    for k in range(1, max_iter + 1):
        x[active] = f(x[active])
        hit = active & (x >= a) & (x <= b)
        R[hit] = x[hit]
        q[hit] = k
        active &= ~hit
        if not active.any():
            break
    return ReturnMap((a, b), th, R, q, active.copy())


def sink_periods(T0: float, n_T: int) -> np.ndarray:
    return T0 + np.arange(n_T) * (T0 / n_T)


def plateau_sink_probability(prc: PRCurve, n_T: int = 40, interval=(4.0, 10.0),
                             T_values: Sequence[float] | None = None) -> float:
    """Fraction of drive periods ``T in [T0, 2T0)`` whose return map to
    ``interval`` has a stable fixed point."""
    if n_T < 10 and T_values is None:
        raise ValueError("n_T must be at least 10")
    Ts = sink_periods(prc.T0, n_T) if T_values is None else np.asarray(T_values)
    hits = sum(1 for T in Ts if first_return_map(prc, T, interval).sinks())
    return hits / len(Ts)


# ---------------------------------------------------------------------------
# derivative factors


@dataclass(frozen=True, eq=False)
class FactorProfile:
    """Per-phase factors of ``f' = <D theta(K_A gamma), gamma'>``.

    ``sin_angle`` is measured against the strong-stable manifold through
    the kicked point (the normal there is ``D theta``); ``sin_angle_cycle``
    against the linear E_ss at the cycle point with the new phase.
    """

    theta: np.ndarray
    fprime: np.ndarray
    dtheta_mag: np.ndarray
    speed: np.ndarray
    sin_angle: np.ndarray
    sin_angle_cycle: np.ndarray

    @property
    def product(self) -> np.ndarray:
        return self.dtheta_mag * self.speed * self.sin_angle

    def to_csv(self, path, header: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["theta", "fprime", "dtheta_mag", "speed", "sin_angle"])
            for row in zip(self.theta, self.fprime, self.dtheta_mag, self.speed, self.sin_angle):
                w.writerow([repr(float(x)) for x in row])


def prc_factors(A: float, c: LimitCycle, phases, h: float = 1e-2) -> FactorProfile:
    """Decompose ``|f'|`` at each phase.  ``f'`` itself is a central
    difference of ``f0`` with step ``h``."""
    phases = np.asarray(phases, dtype=np.float64)
    kA = KickSpec(A)
    out = {k: np.empty(phases.size) for k in ("fp", "dt", "sp", "sa", "sc")}
    for j, t in enumerate(phases):
        fp_ = kicked_new_phase(t + h, A, c)[0]
        fm_ = kicked_new_phase(t - h, A, c)[0]
        f0_ = kicked_new_phase(t, A, c)[0]
        out["fp"][j] = abs(float(circ_diff(fp_, fm_, c.T0))) / (2 * h)
        g = phase_gradient(kick(c.point(t), kA), c)
        vel = c.velocity(t)
        ng, nv = np.linalg.norm(g), np.linalg.norm(vel)
        out["dt"][j] = ng
        out["sp"][j] = nv
        out["sa"][j] = abs(g @ vel) / (ng * nv)
        i = int(round(f0_ / c.dt)) % c.n_samples
        out["sc"][j] = abs(c.frames[i, 0] @ vel) / nv
    return FactorProfile(phases, out["fp"], out["dt"], out["sp"], out["sa"], out["sc"])


# ---------------------------------------------------------------------------
# kink: distance of kicked orbits to the fixed point


@njit(cache=True)
def _closest_approach(fld, p, y0, target, t_max, dt, tol, h0, hmax, hmin):
    """Smallest distance from ``target`` along the orbit of ``y0`` on
    ``[0, t_max]``: sampled every ``dt``, then resampled at ``dt / 50``
    around the coarse minimum."""
    y = y0.copy()
    h = h0
    best = np.sqrt(np.sum((y - target) ** 2))
    y_before = y.copy()
    prev = y.copy()
    t = 0.0
    while t < t_max:
        y, h, _, st = rkf45(fld, p, y, dt, tol, h, hmax, hmin, 4)
        if st != 0:
            return np.nan
        t += dt
        d = np.sqrt(np.sum((y - target) ** 2))
        if d < best:
            best = d
            y_before[:] = prev
        prev[:] = y
    z = y_before.copy()
    fine = dt / 50.0
    for _ in range(100):
        z, h, _, st = rkf45(fld, p, z, fine, tol, h, hmax, hmin, 4)
        if st != 0:
            break
        d = np.sqrt(np.sum((z - target) ** 2))
        if d < best:
            best = d
    return best


def _min_distance_to_fp(theta: float, A: float, c: LimitCycle, t_max: float,
                        cfg: IntegratorConfig, dt: float = 0.05) -> float:
    y = kick(c.point(theta), KickSpec(A))
    tol, h0, hmax, hmin = cfg.as_tuple()
    d = _closest_approach(hh_rhs, c.packed, y, c.fixed_point, float(t_max), dt, tol, h0, hmax, hmin)
    if not math.isfinite(d):
        raise NoConvergence("integration failed during the closest-approach search")
    return float(d)


@dataclass
class _KinkObjective:
    c: LimitCycle
    t_max: float = 100.0
    n_theta: int = 64
    cfg: IntegratorConfig = PHASE_CONFIG
    theta_hint: float | None = None
    cache: dict = field(default_factory=dict)

    def inner(self, A: float) -> tuple[float, float]:
        """``(min distance, minimizing phase)`` over kick phases.

        The landscape is rugged (orbits spiral around the fixed point), so
        a coarse grid is followed by a fine grid around the best few
        coarse points and the previous amplitude's minimizer, then a
        simplex polish.
        """
        A = float(A)
        if A in self.cache:
            return self.cache[A]
        c = self.c
        dist = lambda th: _min_distance_to_fp(float(np.mod(th, c.T0)), A, c, self.t_max, self.cfg)
        step = c.T0 / self.n_theta
        grid = np.arange(self.n_theta) * step
        vals = np.array([dist(t) for t in grid])
        seeds = list(grid[np.argsort(vals)[:3]])
        if self.theta_hint is not None:
            seeds.append(self.theta_hint)
        fine = []
        for s0 in seeds:
            for t in s0 + np.linspace(-1.5 * step, 1.5 * step, 61):
                fine.append((dist(t), t))
        fine.sort()
        best = (math.inf, math.nan)
        fine_step = 3 * step / 60
        for d0, t0 in fine[:3]:
            try:
                x, fx = nelder_mead(lambda z: dist(z[0]), np.array([[t0], [t0 + 0.25 * fine_step]]),
                                    tol=1e-10, max_iter=200)
            except MaxIterExceeded as exc:
                x, fx = exc.x, exc.fx
            if fx < best[0]:
                best = (float(fx), float(np.mod(x[0], c.T0)))
        self.theta_hint = best[1]
        self.cache[A] = best
        return best

    def __call__(self, A: float) -> float:
        return self.inner(A)[0]


def kink_objective(A: float, c: LimitCycle, t_max: float = 100.0, n_theta: int = 64) -> float:
    """Closest approach to the fixed point over kick phases and time."""
    return _KinkObjective(c, t_max, n_theta)(A)


def find_A_crit(bracket=(12.0, 15.0), c: LimitCycle | None = None, t_max: float = 100.0,
                n_theta: int = 64, n_scan: int = 13, tol: float = 1e-6) -> tuple[float, float]:
    """Kick amplitude at which the kicked cycle meets the stable manifold
    of the fixed point.  Returns ``(A_crit, objective)``.

    A coarse scan of the bracket seeds a one-dimensional Nelder-Mead;
    the inner phase search is warm-started from the previous amplitude.
    """
    if c is None:
        raise ValueError("a LimitCycle is required")
    lo, hi = bracket
    obj = _KinkObjective(c, t_max, n_theta)
    As = np.linspace(lo, hi, n_scan)
    vals = np.array([obj(A) for A in As])
    k = int(np.argmin(vals))
    if k in (0, n_scan - 1):
        raise NoMinimumInBracket(f"objective minimal at bracket edge A = {As[k]:.4f}")
    step = As[1] - As[0]
    try:
        x, fx = nelder_mead(lambda z: obj(min(max(z[0], lo), hi)),
                            np.array([[As[k]], [As[k] + 0.5 * step]]), tol=tol, max_iter=300)
    except MaxIterExceeded as exc:
        x, fx = exc.x, exc.fx
    A_c = float(x[0])
    if not (lo < A_c < hi):
        raise NoMinimumInBracket(f"minimizer {A_c:.4f} left the bracket")
    return A_c, float(fx)


# ---------------------------------------------------------------------------
# horseshoes


def lift_critical_points(prc: PRCurve, polish: bool = True) -> np.ndarray:
    """Phases in ``[0, T0)`` where the lift changes direction.

    Found by slope sign changes on the refined grid, treated as a circle,
    and (with ``polish``) refined by a local quadratic fit; otherwise the
    extremal grid node is returned.
    """
    g, L = prc._valid()
    T0 = prc.T0
    gx = np.concatenate([[g[-1] - T0], g, [g[0] + T0]])
    Lx = np.concatenate([[L[-1] - prc.winding * T0], L, [L[0] + prc.winding * T0]])
    s = np.sign(np.diff(Lx))
    out = []
    for i in range(1, s.size):
        if s[i] != 0 and s[i - 1] != 0 and s[i] != s[i - 1]:
            xs, ys = gx[i - 1:i + 2], Lx[i - 1:i + 2]
            x = xs[1]
            if polish:
                a2, a1, _ = np.polyfit(xs - xs[1], ys, 2)
                if a2 != 0:
                    x = float(np.clip(xs[1] - a1 / (2 * a2), xs[0], xs[2]))
            out.append(float(np.mod(x, T0)))
    return np.unique(np.array(out))


def _crossings(L: np.ndarray, a: float, b: float, T0: float) -> int:
    """Number of full passes of the sampled lift ``L`` across the bands
    ``[a + n T0, b + n T0]``."""
    if L.size < 2:
        return 0
    eps = 1e-9 * T0
    a, b = a + eps, b - eps
    total = 0
    n_lo = int(math.floor((L.min() - b) / T0))
    n_hi = int(math.ceil((L.max() - a) / T0))
    for n in range(n_lo, n_hi + 1):
        lo, hi = a + n * T0, b + n * T0
        side = 0
        for y in L:
            if y <= lo:
                if side == 1:
                    total += 1
                side = -1
            elif y >= hi:
                if side == -1:
                    total += 1
                side = 1
    return total


def detect_horseshoe(prc: PRCurve, T: float, max_span: int = 4,
                     candidates: Sequence[tuple[float, float]] | None = None) -> list[tuple[float, float]]:
    """Intervals ``I`` that ``f_T`` maps across themselves at least twice.

    Candidates run between critical points of the lift (spanning up to
    ``max_span`` consecutive monotone branches, wrapping around the
    circle); extra ``candidates`` may be given.  An interval is reported
    when the lift over it passes completely across ``I + n T0`` at least
    twice in total.  Results are sorted by length; endpoints may exceed
    ``T0`` for intervals that wrap.
    """
    f = shift_prc(prc, T)
    g, _ = f._valid()
    T0 = prc.T0
    crit = lift_critical_points(prc, polish=False)
    cand = []
    m = crit.size
    for i in range(m):
        for k in range(1, min(max_span, m) + 1):
            a = crit[i]
            b = crit[(i + k) % m] + T0 * ((i + k) // m)
            if k == m:
                b = a + T0
            cand.append((a, b))
    if candidates:
        cand.extend(candidates)
    ext = np.concatenate([g - T0, g, g + T0, g + 2 * T0])
    found = set()
    for a, b in cand:
        if not (0 < b - a <= T0 + 1e-12):
            continue
        inner = ext[(ext > a) & (ext < b)]
        if inner.size < 2:
            continue
        pts = np.concatenate([[a], inner, [b]])
        if _crossings(f.lift_at(pts), a, b, T0) >= 2:
            found.add((float(a), float(b)))
    return sorted(found, key=lambda ab: (ab[1] - ab[0], ab[0]))
