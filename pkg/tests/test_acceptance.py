"""Acceptance criteria, one test each.  Every test records a pass/fail
line that is printed in the terminal summary."""
import functools
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, cached_acrit, cached_cycle, cached_prc, phase_offset
from hhkick.cycle import asymptotic_phase, find_limit_cycle
from hhkick.forcing import DriveConfig, driven_orbit
from hhkick.models import HHParams, fixed_point_spectrum, hh_jac, hh_rhs
from hhkick.numerics import IntegratorConfig, integrate, integrate_with_tangent
from hhkick.prc import (
    circ_diff,
    detect_horseshoe,
    direct_phase_oracle,
    plateau_sink_probability,
    prc_factors,
    shift_prc,
)
from hhkick.response import Response, ResponseProbabilities, lambda_max, period_grid, run_cells

JOBS = os.cpu_count() or 1
TIGHT = IntegratorConfig(abs_tolerance=1e-10, initial_step=1e-3, max_step=0.1, min_step=1e-14)
ORACLE = IntegratorConfig(abs_tolerance=1e-12, initial_step=1e-4, max_step=0.05, min_step=1e-15)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@functools.lru_cache(maxsize=None)
def grid_rows(A: float, n: int = 200, width: float = 0.0, stride: int = 1):
    Ts = period_grid(cached_cycle().T0, n)[::stride]
    return tuple(run_cells([(A, T, width) for T in Ts], jobs=JOBS))


def fractions(rows):
    return ResponseProbabilities.from_rows(list(rows))


def count(rows, cls):
    return sum(r.classification is cls for r in rows)


def test_01_period():
    t = time.perf_counter()
    c = find_limit_cycle(HHParams(I=14.0))
    dt = time.perf_counter() - t
    ok = abs(c.T0 - 12.944) <= 0.05 and dt < 10.0
    report(1, ok, f"T0 = {c.T0:.4f} ms (target 12.944 +/- 0.05), {dt:.1f} s")


def test_02_cycle_exponents(cycle):
    mu = cycle.exponents
    ref = np.array([-0.20, -2.0, -8.3])
    rel = np.abs(mu[1:] - ref) / np.abs(ref)
    ok = abs(mu[0]) <= 1e-3 and np.all(rel <= 0.10)
    report(2, ok, f"exponents {np.array2string(mu, precision=4)}, worst relative error {rel.max():.3f}")


def test_03_fixed_point_spectrum():
    ev = fixed_point_spectrum(HHParams(I=14.0))
    ref = [-4.97815, -0.146991, 0.0763367 + 0.61866j, 0.0763367 - 0.61866j]
    pool = list(ev)
    worst = 0.0
    for r in ref:
        j = int(np.argmin([abs(e - r) for e in pool]))
        worst = max(worst, abs(pool.pop(j) - r) / abs(r))
    report(3, worst < 0.01, f"eigenvalues {np.round(ev, 5)}, worst |l - ref| / |ref| = {worst:.4f}")


def test_04_weak_kick_dichotomy():
    weak = grid_rows(5.0, 100)
    strong = grid_rows(40.0)[::2]
    n_weak = count(weak, Response.CHAOS)
    n_c, n_e = count(strong, Response.CHAOS), count(strong, Response.ENTRAINMENT)
    ok = n_weak == 0 and n_c >= 1 and n_e >= 1
    report(4, ok, f"A=5: {n_weak} chaos cells of {len(weak)}; A=40: {n_c} chaos, {n_e} entrained of {len(strong)}")


@pytest.mark.parametrize("A", [10.0, 20.0])
def test_05_period_shift(A, T0):
    base = np.linspace(T0, 7 * T0, 20)
    rows = run_cells([(A, T, 0.0) for T in np.concatenate([base, base + T0])], jobs=JOBS)
    good = 0
    for a, b in zip(rows[:20], rows[20:]):
        if a.estimate is None or b.estimate is None:
            continue
        ea, eb = a.estimate, b.estimate
        tol = max(6 * np.hypot(ea.stderr, eb.stderr), 0.1 * abs(ea.lambda_hat))
        good += abs(eb.lambda_hat - ea.lambda_hat) < tol
    report(5, good >= 0.8 * 20, f"A={A:g}: {good}/20 pairs with lambda(T+T0) ~ lambda(T)")


def test_06_probabilities():
    pr = {A: fractions(grid_rows(A)) for A in (10.0, 20.0, 30.0, 40.0)}
    p10 = pr[10.0]
    ok = abs(p10.p_chaos - 0.20) <= 0.10 and abs(p10.p_entrain - 0.70) <= 0.10
    ok &= all(p.p_entrain > p.p_chaos for p in pr.values())
    table = "; ".join(f"A={A:g} chaos {p.p_chaos:.3f} entrain {p.p_entrain:.3f}" for A, p in pr.items())
    report(6, ok, table)


def test_07_prc_winding():
    w = {A: cached_prc(A).winding for A in (5.0, 10.0, 20.0)}
    report(7, w == {5.0: 1, 10.0: 1, 20.0: 0}, f"winding {w}")


def test_08_prc_oracle(cycle):
    rng = np.random.default_rng(8)
    worst = {}
    for A in (5.0, 10.0, 20.0):
        prc = cached_prc(A)
        gaps = [abs(float(circ_diff(prc(th), direct_phase_oracle(th, A, cycle), cycle.T0)))
                for th in rng.uniform(0, cycle.T0, 20)]
        worst[A] = max(gaps)
    report(8, max(worst.values()) < 0.05, "max gap " + ", ".join(f"A={A:g}: {g:.2e}" for A, g in worst.items()))


def test_09_plateau_sinks():
    target = {5.0: 0.41, 10.0: 0.58, 20.0: 0.68, 30.0: 0.76}
    off = phase_offset()
    got = {A: plateau_sink_probability(cached_prc(A), 40, (4.0 + off, 10.0 + off)) for A in target}
    ok = all(abs(got[A] - target[A]) <= 0.08 for A in target)
    detail = ", ".join(f"A={A:g}: {got[A]:.3f} (target {target[A]})" for A in target)
    report(9, ok, f"{detail}; interval [4, 10] + {off:.3f}")


def test_10_acrit():
    A, obj = cached_acrit()
    report(10, abs(A - 13.59) <= 0.05, f"A_crit = {A:.4f} (target 13.59 +/- 0.05), objective {obj:.2e}")


def test_11_horseshoe():
    found = detect_horseshoe(cached_prc(10.0), 81.0)
    report(11, len(found) >= 1, f"{len(found)} intervals, shortest {found[0] if found else None}")


def test_12_finite_pulses():
    impulse = fractions(grid_rows(10.0)[::2])
    diffs = {}
    for t0 in (0.05, 0.3, 2.75, 9.0):
        box = fractions(grid_rows(10.0, 200, t0, 2))
        diffs[t0] = max(abs(box.by_class[c] - impulse.by_class[c]) for c in Response)
    ok = all(diffs[t] < 0.1 for t in (0.05, 0.3, 2.75)) and diffs[9.0] >= 0.1
    report(12, ok, "max class difference " + ", ".join(f"t0={t}: {d:.3f}" for t, d in diffs.items()))


def test_13_property_suite(cycle):
    checks = {}

    # tangent propagation against central differences
    d = DriveConfig.impulse(10.0, 20.0)
    x = cycle.point(2.0)
    w0 = np.array([0.3, 0.01, -0.02, 0.01])
    orb = driven_orbit(x, d, n=3, w0=w0, cfg=TIGHT)
    w = orb.tangent * np.exp(orb.log_growth.sum())
    h = 1e-6
    fd = (driven_orbit(x + h * w0, d, n=3, cfg=TIGHT).states[-1]
          - driven_orbit(x - h * w0, d, n=3, cfg=TIGHT).states[-1]) / (2 * h)
    checks["tangent"] = np.linalg.norm(w - fd) / np.linalg.norm(fd) < 0.01

    # derivative factor product
    f = prc_factors(10.0, cycle, np.arange(0.5, 12.5, 1.0))
    well = f.fprime > 0.05
    checks["factors"] = bool(np.all(np.abs(f.product[well] / f.fprime[well] - 1) < 0.02))

    # shift periodicity
    prc = cached_prc(10.0)
    checks["shift"] = np.abs(circ_diff(shift_prc(prc, cycle.T0).values, prc.values, cycle.T0)).max() <= 1e-12

    # asymptotic phase along the flow
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(4):
        y = cycle.point(rng.uniform(0, cycle.T0)) + rng.normal(size=4) * [0.3, 3e-3, 3e-3, 3e-3]
        a = asymptotic_phase(y, cycle)
        b = asymptotic_phase(integrate(hh_rhs, y, 1.7, ORACLE, cycle.packed), cycle)
        worst = max(worst, abs(float(circ_diff(b, a + 1.7, cycle.T0))))
    checks["flow phase"] = worst < 1e-3

    # strong-stable frames carried by the variational flow
    ang = 0.0
    for i in range(0, cycle.n_samples, 97):
        j = (i + 1) % cycle.n_samples
        B = cycle.frames[j, 1:]
        for s in cycle.frames[i, 1:]:
            _, v = integrate_with_tangent(hh_rhs, hh_jac, cycle.states[i], s, cycle.dt, ORACLE, cycle.packed)
            v = v / np.linalg.norm(v)
            ang = max(ang, float(np.arcsin(min(1.0, np.linalg.norm(v - B.T @ (B @ v))))))
    checks["frames"] = ang < 1e-3

    # unforced exponent
    e = lambda_max(DriveConfig.impulse(0.0, 20.0))
    checks["lambda(A=0)"] = abs(e.lambda_hat) <= 3 * e.stderr

    failed = [k for k, v in checks.items() if not v]
    report(13, not failed, f"{len(checks) - len(failed)}/{len(checks)} properties hold"
           + (f"; failing: {', '.join(failed)}" if failed else ""))
