"""Pulse forcing: kicks, the stroboscopic time-T map and driven orbits.

States are sampled immediately before each pulse.  An impulse is a jump
``v -> v + A`` between integration segments.  A box pulse of width ``t0``
adds the constant current ``A / t0`` to ``dv/dt`` on ``[0, t0]``; the
pulse edges always coincide with step boundaries.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

from .models import P_EXTRA, HHParams, find_fixed_point, hh_matrix_rhs, hh_rhs, hh_tangent_rhs
from .numerics import (
    IntegratorConfig,
    NoConvergence,
    raise_for_status,
    rkf45,
    rkf45_grid,
)

DRIVE_CONFIG = IntegratorConfig(abs_tolerance=1e-6, initial_step=1e-3, max_step=0.5, min_step=1e-12)
POLISH_CONFIG = IntegratorConfig(abs_tolerance=1e-11, initial_step=1e-3, max_step=0.25, min_step=1e-14)


@dataclass(frozen=True)
class Impulse:
    pass


@dataclass(frozen=True)
class Box:
    t0: float

    def __post_init__(self):
        if not self.t0 > 0:
            raise ValueError("box width t0 must be positive")


@dataclass(frozen=True)
class KickSpec:
    """Pulse amplitude (mV) and shape.

    A box pulse delivers the same total charge as the impulse of the same
    amplitude: its height is ``A / t0``.
    """

    amplitude: float
    shape: Impulse | Box = field(default_factory=Impulse)

    @property
    def width(self) -> float:
        return self.shape.t0 if isinstance(self.shape, Box) else 0.0

    @property
    def is_impulse(self) -> bool:
        return isinstance(self.shape, Impulse)

    @property
    def height(self) -> float:
        return math.inf if self.is_impulse else self.amplitude / self.width


@dataclass(frozen=True)
class DriveConfig:
    kick: KickSpec
    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("drive period T must be positive")
        if self.T < self.kick.width:
            raise ValueError("drive period shorter than the pulse width")

    @classmethod
    def impulse(cls, A: float, T: float) -> "DriveConfig":
        return cls(KickSpec(A), T)

    @classmethod
    def box(cls, A: float, t0: float, T: float) -> "DriveConfig":
        return cls(KickSpec(A, Box(t0)), T)


class OrbitEscaped(RuntimeError):
    """A driven orbit left the region where the integrator can follow it."""


# ---------------------------------------------------------------------------
# compiled driver


@njit(cache=True)
def _drive(fld, p, y0, T, A, t0, n, tol, h0, hmax, hmin, renorm, states, logs):
    """Apply ``n`` kick-then-flow periods to ``y0``.

    ``y0[:4]`` is the state; any trailing entries are tangent data carried
    by ``fld``.  ``states`` receives the ``n + 1`` pre-kick states.  With
    ``renorm`` set, ``y[4:8]`` is renormalized after every period and its
    log growth is stored in ``logs``.  Returns ``(y, k_done, status)``.
    """
    pe = p.copy()
    if t0 > 0.0:
        pe[P_EXTRA] = A / t0
    y = y0.copy()
    h = h0
    for k in range(n):
        for i in range(4):
            states[k, i] = y[i]
        if t0 == 0.0:
            y[0] += A
            y, h, _, st = rkf45(fld, p, y, T, tol, h, hmax, hmin, 4)
        else:
            y, h, _, st = rkf45(fld, pe, y, t0, tol, h, hmax, hmin, 4)
            if st == 0 and T > t0:
                y, h, _, st = rkf45(fld, p, y, T - t0, tol, h, hmax, hmin, 4)
        if st != 0:
            return y, k, st
        if renorm:
            s = 0.0
            for i in range(4, 8):
                s += y[i] * y[i]
            s = math.sqrt(s)
            if not (s > 0.0 and math.isfinite(s)):
                return y, k, 2
            logs[k] = math.log(s)
            for i in range(4, 8):
                y[i] /= s
    for i in range(4):
        states[n, i] = y[i]
    return y, n, 0


def _run(fld, y0, d: DriveConfig, p: HHParams, n: int, cfg: IntegratorConfig, renorm: bool):
    tol, h0, hmax, hmin = cfg.as_tuple()
    states = np.empty((n + 1, 4))
    logs = np.zeros(n)
    y, done, status = _drive(fld, p.pack(), np.asarray(y0, dtype=np.float64), float(d.T),
                             float(d.kick.amplitude), float(d.kick.width), int(n),
                             tol, h0, hmax, hmin, renorm, states, logs)
    if status != 0:
        raise OrbitEscaped(f"driven orbit failed at iterate {done} (status {status})")
    return y, states, logs


# ---------------------------------------------------------------------------
# public maps


def kick(x, k: KickSpec, p: HHParams = HHParams(), cfg: IntegratorConfig = DRIVE_CONFIG) -> np.ndarray:
    """Apply one pulse.  A box pulse is integrated over its duration."""
    x = np.asarray(x, dtype=np.float64)
    if k.is_impulse:
        out = x.copy()
        out[0] += k.amplitude
        return out
    pe = p.pack(extra_current=k.height)
    tol, h0, hmax, hmin = cfg.as_tuple()
    y, _, _, status = rkf45(hh_rhs, pe, x, k.width, tol, h0, hmax, hmin, 4)
    raise_for_status(status, "box pulse")
    return y


def time_T_map(x, d: DriveConfig, p: HHParams = HHParams(), cfg: IntegratorConfig = DRIVE_CONFIG) -> np.ndarray:
    """F_T(x): kick, then flow for the rest of the period."""
    y, _, _ = _run(hh_rhs, x, d, p, 1, cfg, False)
    return y


@dataclass(frozen=True, eq=False)
class DrivenOrbit:
    """Pre-kick snapshots ``states[0..n]`` with per-iterate log growth of a
    renormalized tangent vector (empty when no tangent was tracked)."""

    drive: DriveConfig
    states: np.ndarray
    log_growth: np.ndarray
    tangent: np.ndarray | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "v", "m", "n", "h"])
            for k, x in enumerate(self.states):
                w.writerow([k] + [repr(float(c)) for c in x])


def driven_orbit(x0, d: DriveConfig, p: HHParams = HHParams(), n: int = 1,
                 w0=None, cfg: IntegratorConfig = DRIVE_CONFIG) -> DrivenOrbit:
    """Iterate F_T ``n`` times from ``x0``.

    If ``w0`` is given the tangent vector is carried along (kick
    derivative is the identity for impulses; box pulses are differentiated
    through the integration) and renormalized every iterate.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    if w0 is None:
        _, states, _ = _run(hh_rhs, x0, d, p, n, cfg, False)
        return DrivenOrbit(d, states, np.zeros(0))
    w0 = np.asarray(w0, dtype=np.float64)
    nw = np.linalg.norm(w0)
    if nw == 0:
        raise ValueError("w0 must be nonzero")
    y, states, logs = _run(hh_tangent_rhs, np.concatenate([x0, w0 / nw]), d, p, n, cfg, True)
    logs = logs.copy()
    logs[0] += math.log(nw)
    return DrivenOrbit(d, states, logs, y[4:8].copy())


def map_jacobian(x, d: DriveConfig, p: HHParams = HHParams(), q: int = 1,
                 cfg: IntegratorConfig = POLISH_CONFIG):
    """Return ``(F_T^q(x), D F_T^q(x))``."""
    y0 = np.concatenate([np.asarray(x, dtype=np.float64), np.eye(4).ravel()])
    y, _, _ = _run(hh_matrix_rhs, y0, d, p, q, cfg, False)
    return y[:4].copy(), y[4:].reshape(4, 4).copy()


def polish_periodic_orbit(x, d: DriveConfig, p: HHParams = HHParams(), q: int = 1,
                          tol: float = 1e-10, max_iter: int = 30,
                          cfg: IntegratorConfig = POLISH_CONFIG) -> np.ndarray:
    """Newton solve of ``F_T^q(x) = x`` from a nearby seed."""
    x = np.asarray(x, dtype=np.float64).copy()
    I4 = np.eye(4)
    for _ in range(max_iter):
        fx, J = map_jacobian(x, d, p, q, cfg)
        r = fx - x
        if np.linalg.norm(r) < tol:
            return x
        step = np.linalg.solve(J - I4, -r)
        # keep gates inside (0, 1)
        lam = 1.0
        while lam > 1e-4:
            trial = x + lam * step
            if np.all(trial[1:] > 0) and np.all(trial[1:] < 1):
                break
            lam *= 0.5
        x = x + lam * step
    fx, _ = map_jacobian(x, d, p, q, cfg)
    if np.linalg.norm(fx - x) < tol:
        return x
    raise NoConvergence(f"periodic orbit Newton stalled at residual {np.linalg.norm(fx - x):.3e}")


def periodic_residual(x, d: DriveConfig, p: HHParams = HHParams(), q: int = 1,
                      cfg: IntegratorConfig = POLISH_CONFIG) -> float:
    fx, _ = map_jacobian(x, d, p, q, cfg)
    return float(np.linalg.norm(fx - np.asarray(x)))


@lru_cache(maxsize=16)
def _cycle_seed(p: HHParams) -> tuple:
    fp = find_fixed_point(p)
    x = fp + np.array([-10.0, 0.0, 0.0, 0.0])
    tol, h0, hmax, hmin = DRIVE_CONFIG.as_tuple()
    y, _, _, status = rkf45(hh_rhs, p.pack(), x, 500.0, tol, h0, hmax, hmin, 4)
    raise_for_status(status, "cycle seed")
    return tuple(float(c) for c in y)


def cycle_seed(p: HHParams = HHParams()) -> np.ndarray:
    """A point on (or within integrator tolerance of) the attracting cycle,
    obtained cheaply by a long unforced transient."""
    return np.array(_cycle_seed(p))


def find_periodic_orbit(x, d: DriveConfig, p: HHParams = HHParams(), max_q: int = 8,
                        n_settle: int = 300, seed_tol: float = 1e-3, tol: float = 1e-10):
    """Locate a periodic orbit of F_T near the forward limit of ``x``.

    The orbit is settled with the driving tolerance, the smallest period
    ``q <= max_q`` with ``|F^q(y) - y| < seed_tol`` is picked, and the
    point is Newton-polished.  Returns ``(x_hat, q)``.
    """
    orb = driven_orbit(x, d, p, n_settle + max_q)
    y = orb.states[n_settle]
    for q in range(1, max_q + 1):
        if np.linalg.norm(orb.states[n_settle + q] - y) < seed_tol:
            return polish_periodic_orbit(y, d, p, q, tol=tol), q
    raise NoConvergence(f"no periodic orbit of period <= {max_q} found")


def driven_trace(x0, d: DriveConfig, p: HHParams = HHParams(), duration: float = 100.0,
                 dt_out: float = 0.01, cfg: IntegratorConfig = DRIVE_CONFIG):
    """Dense time course ``(t, states)`` of the driven system, first pulse
    at ``t = 0``.  With zero amplitude there are no pulse events and the
    run is one continuous integration."""
    if duration <= 0 or dt_out <= 0:
        raise ValueError("duration and dt_out must be positive")
    x = np.asarray(x0, dtype=np.float64).copy()
    tol, h0, hmax, hmin = cfg.as_tuple()
    n_out = int(round(duration / dt_out))
    t_all = np.arange(n_out + 1) * dt_out
    if d.kick.amplitude == 0.0:
        ys, status = rkf45_grid(hh_rhs, p.pack(), x, t_all, tol, h0, hmax, hmin, 4)
        raise_for_status(status, "trace")
        return t_all, ys
    pk = p.pack()
    pe = pk if d.kick.is_impulse else p.pack(extra_current=d.kick.height)
    out = np.empty((t_all.size, 4))
    idx = 0
    k = 0
    while idx < t_all.size:
        start = k * d.T
        end = min(start + d.T, duration)
        if d.kick.is_impulse:
            x[0] += d.kick.amplitude
            pieces = [(start, end, pk)]
        else:
            mid = min(start + d.kick.width, end)
            pieces = [(start, mid, pe), (mid, end, pk)]
        for a, b, prm in pieces:
            last = b >= duration
            j_end = int(np.searchsorted(t_all, b, side="right" if last else "left"))
            local = np.concatenate([np.maximum(t_all[idx:j_end] - a, 0.0), [b - a]])
            ys, status = rkf45_grid(hh_rhs, prm, x, local, tol, h0, hmax, hmin, 4)
            raise_for_status(status, "trace")
            out[idx:j_end] = ys[:-1]
            x = ys[-1].copy()
            idx = j_end
        k += 1
    return t_all, out
