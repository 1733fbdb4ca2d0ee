"""Vector fields: the Hodgkin-Huxley membrane and the Zaslavsky shear
oscillator.

Voltage follows the original Hodgkin-Huxley convention
(``v = outside - inside``), so action potentials are downward spikes and
the rest state sits near ``v = 0``.

All compiled fields share the signature ``field(y, p, dy)`` where ``p``
is the packed parameter vector produced by :meth:`HHParams.pack`.  Slot
``P_EXTRA`` of the packed vector holds an additional current added to
``dv/dt``; it is zero except while a finite-duration pulse is delivered.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
from numba import njit

from .numerics import NoConvergence, eigenvalues4

P_VNA, P_VK, P_VL, P_GNA, P_GK, P_GL, P_C, P_I, P_EXTRA = range(9)


@dataclass(frozen=True)
class HHParams:
    """Original squid-axon parameters, with injected current ``I``."""

    v_Na: float = -115.0
    v_K: float = 12.0
    v_leak: float = -10.613
    g_Na: float = 120.0
    g_K: float = 36.0
    g_leak: float = 0.3
    C: float = 1.0
    I: float = 14.0

    def __post_init__(self):
        if min(self.g_Na, self.g_K, self.g_leak) <= 0:
            raise ValueError("conductances must be positive")
        if self.C <= 0:
            raise ValueError("capacitance must be positive")

    def pack(self, extra_current: float = 0.0) -> np.ndarray:
        return np.array([self.v_Na, self.v_K, self.v_leak, self.g_Na, self.g_K,
                         self.g_leak, self.C, self.I, extra_current], dtype=np.float64)

    def with_(self, **kw) -> "HHParams":
        return replace(self, **kw)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class RateSet:
    alpha_m: float
    beta_m: float
    alpha_n: float
    beta_n: float
    alpha_h: float
    beta_h: float


# ---------------------------------------------------------------------------
# rates


@njit(cache=True)
def psi(u):
    """u / (exp(u) - 1), continuous through u = 0."""
    if abs(u) < 1e-4:
        return 1.0 - 0.5 * u + u * u / 12.0
    return u / math.expm1(u)


@njit(cache=True)
def dpsi(u):
    if abs(u) < 1e-2:
        u2 = u * u
        return -0.5 + u / 6.0 - u * u2 / 180.0 + u2 * u2 * u / 5040.0
    em = math.expm1(u)
    return (em - u * (em + 1.0)) / (em * em)


@njit(cache=True)
def rates_and_slopes(v):
    """Return (am, bm, an, bn, ah, bh) followed by their v-derivatives."""
    um = (v + 25.0) / 10.0
    un = (v + 10.0) / 10.0
    am = psi(um)
    bm = 4.0 * math.exp(v / 18.0)
    an = 0.1 * psi(un)
    bn = 0.125 * math.exp(v / 80.0)
    ah = 0.07 * math.exp(v / 20.0)
    bh = 1.0 / (1.0 + math.exp((v + 30.0) / 10.0))
    return (am, bm, an, bn, ah, bh,
            dpsi(um) / 10.0, bm / 18.0, 0.01 * dpsi(un), bn / 80.0, ah / 20.0,
            -bh * (1.0 - bh) / 10.0)


@njit(cache=True)
def _rates(v, r):
    t = rates_and_slopes(v)
    for i in range(12):
        r[i] = t[i]


def hh_rates(v: float) -> RateSet:
    r = np.empty(12)
    _rates(float(v), r)
    return RateSet(*r[:6])


# ---------------------------------------------------------------------------
# field and Jacobian


@njit(cache=True)
def _vdot(v, m, n, h, p):
    n2 = n * n
    return (-p[P_I] - p[P_GK] * n2 * n2 * (v - p[P_VK]) - p[P_GNA] * m * m * m * h * (v - p[P_VNA])
            - p[P_GL] * (v - p[P_VL])) / p[P_C] + p[P_EXTRA]


@njit(cache=True)
def hh_rhs(y, p, dy):
    """Compiled HH field on a 4-vector."""
    v, m, n, h = y[0], y[1], y[2], y[3]
    am, bm, an, bn, ah, bh, _, _, _, _, _, _ = rates_and_slopes(v)
    dy[0] = _vdot(v, m, n, h, p)
    dy[1] = am * (1.0 - m) - bm * m
    dy[2] = an * (1.0 - n) - bn * n
    dy[3] = ah * (1.0 - h) - bh * h


@njit(cache=True)
def _jac_entries(v, m, n, h, p, r):
    """Nonzero Jacobian entries: first row, then d(gate)/dv and d(gate)/d(gate)."""
    am, bm, an, bn, ah, bh, dam, dbm, dan, dbn, dah, dbh = r
    C = p[P_C]
    n2 = n * n
    m2 = m * m
    j00 = -(p[P_GK] * n2 * n2 + p[P_GNA] * m2 * m * h + p[P_GL]) / C
    j01 = -3.0 * p[P_GNA] * m2 * h * (v - p[P_VNA]) / C
    j02 = -4.0 * p[P_GK] * n2 * n * (v - p[P_VK]) / C
    j03 = -p[P_GNA] * m2 * m * (v - p[P_VNA]) / C
    j10 = dam * (1.0 - m) - dbm * m
    j20 = dan * (1.0 - n) - dbn * n
    j30 = dah * (1.0 - h) - dbh * h
    return j00, j01, j02, j03, j10, -(am + bm), j20, -(an + bn), j30, -(ah + bh)


@njit(cache=True)
def hh_jac(x, p):
    v, m, n, h = x[0], x[1], x[2], x[3]
    j00, j01, j02, j03, j10, j11, j20, j22, j30, j33 = _jac_entries(
        v, m, n, h, p, rates_and_slopes(v))
    J = np.zeros((4, 4))
    J[0, 0], J[0, 1], J[0, 2], J[0, 3] = j00, j01, j02, j03
    J[1, 0], J[1, 1] = j10, j11
    J[2, 0], J[2, 2] = j20, j22
    J[3, 0], J[3, 3] = j30, j33
    return J


@njit(cache=True)
def _hh_with_jac(y, p, dy):
    v, m, n, h = y[0], y[1], y[2], y[3]
    r = rates_and_slopes(v)
    dy[0] = _vdot(v, m, n, h, p)
    dy[1] = r[0] * (1.0 - m) - r[1] * m
    dy[2] = r[2] * (1.0 - n) - r[3] * n
    dy[3] = r[4] * (1.0 - h) - r[5] * h
    return _jac_entries(v, m, n, h, p, r)


@njit(cache=True)
def hh_tangent_rhs(y, p, dy):
    """State plus one tangent vector: y = (x[4], w[4])."""
    j00, j01, j02, j03, j10, j11, j20, j22, j30, j33 = _hh_with_jac(y, p, dy)
    w0, w1, w2, w3 = y[4], y[5], y[6], y[7]
    dy[4] = j00 * w0 + j01 * w1 + j02 * w2 + j03 * w3
    dy[5] = j10 * w0 + j11 * w1
    dy[6] = j20 * w0 + j22 * w2
    dy[7] = j30 * w0 + j33 * w3


@njit(cache=True)
def _matrix_part(y, dy, off, jac):
    j00, j01, j02, j03, j10, j11, j20, j22, j30, j33 = jac
    # rows of the 4x4 matrix start at off, off+4, off+8, off+12
    for c in range(4):
        w0, w1, w2, w3 = y[off + c], y[off + 4 + c], y[off + 8 + c], y[off + 12 + c]
        dy[off + c] = j00 * w0 + j01 * w1 + j02 * w2 + j03 * w3
        dy[off + 4 + c] = j10 * w0 + j11 * w1
        dy[off + 8 + c] = j20 * w0 + j22 * w2
        dy[off + 12 + c] = j30 * w0 + j33 * w3


@njit(cache=True)
def hh_matrix_rhs(y, p, dy):
    """State plus a 4x4 tangent matrix stored row-major: y = (x[4], M[16])."""
    jac = _hh_with_jac(y, p, dy)
    _matrix_part(y, dy, 4, jac)


@njit(cache=True)
def hh_pair_matrix_rhs(y, p, dy):
    """Reference orbit, probe orbit and probe Jacobian: y = (x1, x2, J[16])."""
    hh_rhs(y, p, dy)
    jac = _hh_with_jac(y[4:], p, dy[4:])
    _matrix_part(y, dy, 8, jac)


def hh_field(x, p: HHParams = HHParams()) -> np.ndarray:
    dx = np.empty(4)
    hh_rhs(np.asarray(x, dtype=np.float64), p.pack(), dx)
    return dx


def hh_jacobian(x, p: HHParams = HHParams()) -> np.ndarray:
    return hh_jac(np.asarray(x, dtype=np.float64), p.pack())


def gate_steady_state(v: float) -> np.ndarray:
    r = np.empty(12)
    _rates(float(v), r)
    return np.array([r[0] / (r[0] + r[1]), r[2] / (r[2] + r[3]), r[4] / (r[4] + r[5])])


def _reduced_current(v, p: HHParams):
    m, n, h = gate_steady_state(v)
    return hh_field(np.array([v, m, n, h]), p)[0]


def default_fixed_point_guess(p: HHParams) -> np.ndarray:
    """Rest-state guess from a sign change of the reduced current balance."""
    vs = np.linspace(-40.0, 30.0, 701)
    g = np.array([_reduced_current(v, p) for v in vs])
    idx = np.nonzero(np.sign(g[:-1]) != np.sign(g[1:]))[0]
    if len(idx) == 0:
        v = vs[np.argmin(np.abs(g))]
    else:
        # the physiological rest branch is the crossing closest to v = 0
        i = idx[np.argmin(np.abs(vs[idx]))]
        a, b = vs[i], vs[i + 1]
        for _ in range(60):
            c = 0.5 * (a + b)
            if np.sign(_reduced_current(c, p)) == np.sign(_reduced_current(a, p)):
                a = c
            else:
                b = c
        v = 0.5 * (a + b)
    return np.concatenate([[v], gate_steady_state(v)])


def find_fixed_point(p: HHParams = HHParams(), guess=None, max_iter: int = 100) -> np.ndarray:
    """Damped Newton iteration for a zero of the HH field."""
    x = default_fixed_point_guess(p) if guess is None else np.array(guess, dtype=np.float64)
    res = np.linalg.norm(hh_field(x, p))
    for _ in range(max_iter):
        if res < 1e-12:
            break
        step = np.linalg.solve(hh_jacobian(x, p), -hh_field(x, p))
        lam = 1.0
        while lam > 1e-8:
            trial = x + lam * step
            if np.all((trial[1:] > 0) & (trial[1:] < 1)):
                r_trial = np.linalg.norm(hh_field(trial, p))
                if r_trial < res:
                    break
            lam *= 0.5
        else:
            raise NoConvergence("damped Newton stalled")
        x, res = trial, r_trial
    if res >= 1e-10:
        raise NoConvergence(f"fixed point residual {res:.3e}")
    return x


def fixed_point_spectrum(p: HHParams = HHParams(), x=None) -> np.ndarray:
    x = find_fixed_point(p) if x is None else x
    return eigenvalues4(hh_jacobian(x, p))


# ---------------------------------------------------------------------------
# shear oscillator


@dataclass(frozen=True)
class ShearModel:
    """theta'' + lam theta' = mu + A K(theta) sum delta(t - nT).

    The state lives on the cylinder (theta mod 2 pi, theta_dot); the
    unkicked flow relaxes onto the circle ``theta_dot = mu / lam``.  The
    kick adds ``A * direction(theta)`` to ``theta_dot`` (a radial kick).
    """

    lam: float = 1.0
    mu: float = 1.0
    A: float = 0.0
    direction: object = math.sin

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("damping must be positive")


def shear_field(state, model: ShearModel) -> np.ndarray:
    theta, omega = state
    return np.array([omega, model.mu - model.lam * omega])


def shear_flow(state, t: float, model: ShearModel) -> np.ndarray:
    """Closed-form unkicked flow for time ``t``."""
    theta, omega = state
    w_inf = model.mu / model.lam
    decay = math.exp(-model.lam * t)
    omega_t = w_inf + (omega - w_inf) * decay
    theta_t = theta + w_inf * t + (omega - w_inf) * (1.0 - decay) / model.lam
    return np.array([theta_t, omega_t])


def shear_kick(state, model: ShearModel) -> np.ndarray:
    theta, omega = state
    return np.array([theta, omega + model.A * model.direction(theta)])


@njit(cache=True)
def shear_rhs(y, p, dy):
    """Compiled shear field, p = (lam, mu)."""
    dy[0] = y[1]
    dy[1] = p[1] - p[0] * y[1]
