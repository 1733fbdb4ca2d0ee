"""Largest Lyapunov exponent of the time-T map, response classes, sweeps
over the drive period and orbit autocovariance."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .forcing import (
    DRIVE_CONFIG,
    Box,
    DriveConfig,
    Impulse,
    KickSpec,
    OrbitEscaped,
    cycle_seed,
    driven_orbit,
)
from .models import HHParams
from .numerics import IntegratorConfig

DEFAULT_W0 = np.array([1.0, 1.0, 1.0, 1.0]) / 2.0
N_BATCHES = 10


class Response(str, Enum):
    CHAOS = "chaos"
    ENTRAINMENT = "entrainment"
    ROTATION = "rotation"
    AMBIGUOUS = "ambiguous"


def classify(lambda_hat: float | "LyapunovEstimate", stderr: float | None = None) -> Response:
    """Threshold rule: chaos above 3 eps, entrainment below -3 eps,
    rotation within eps/3 of zero, ambiguous otherwise."""
    if isinstance(lambda_hat, LyapunovEstimate):
        lambda_hat, stderr = lambda_hat.lambda_hat, lambda_hat.stderr
    if stderr is None or stderr < 0:
        raise ValueError("stderr must be a non-negative number")
    if lambda_hat > 3 * stderr:
        return Response.CHAOS
    if lambda_hat < -3 * stderr:
        return Response.ENTRAINMENT
    if abs(lambda_hat) < stderr / 3:
        return Response.ROTATION
    return Response.AMBIGUOUS


@dataclass(frozen=True)
class LyapunovEstimate:
    """Per-unit-time exponent estimate (ms^-1) with batch-means error."""

    lambda_hat: float
    stderr: float
    n_steps: int
    classification: Response

    @classmethod
    def from_increments(cls, logs: np.ndarray, T: float, n_batches: int = N_BATCHES) -> "LyapunovEstimate":
        logs = np.asarray(logs, dtype=np.float64)
        n = logs.size
        lam = float(logs.sum() / (n * T))
        usable = (n // n_batches) * n_batches
        batches = logs[:usable].reshape(n_batches, -1).mean(axis=1) / T
        err = float(batches.std(ddof=1) / math.sqrt(n_batches))
        return cls(lam, err, n, classify(lam, err))


def lambda_max(d: DriveConfig, p: HHParams = HHParams(), n_steps: int = 1000, n_transient: int = 100,
               x0=None, w0=None, cfg: IntegratorConfig = DRIVE_CONFIG) -> LyapunovEstimate:
    """Estimate the top Lyapunov exponent of F_T by tangent growth.

    The tangent vector is renormalized every iterate; the first
    ``n_transient`` increments are discarded.  Raises OrbitEscaped if the
    orbit cannot be followed.
    """
    if n_steps < 100:
        raise ValueError("n_steps must be at least 100")
    x0 = cycle_seed(p) if x0 is None else np.asarray(x0, dtype=np.float64)
    w0 = DEFAULT_W0 if w0 is None else w0
    orb = driven_orbit(x0, d, p, n_transient + n_steps, w0=w0, cfg=cfg)
    return LyapunovEstimate.from_increments(orb.log_growth[n_transient:], d.T)


ORACLE_CONFIG = IntegratorConfig(abs_tolerance=1e-10, initial_step=1e-3, max_step=0.5, min_step=1e-14)


def divergence_slope(d: DriveConfig, p: HHParams = HHParams(), x0=None, sep: float = 1e-6,
                     n_steps: int = 1000, n_transient: int = 100, cap: float = 1e-3,
                     cfg: IntegratorConfig = ORACLE_CONFIG) -> float:
    """Top exponent from two nearby orbits (no variational equations).

    The companion orbit is pulled back to distance ``sep`` whenever the
    separation exceeds ``cap``; growth factors are accumulated in between.
    The tolerance must sit well below ``sep`` or step-size noise dominates.
    """
    x0 = cycle_seed(p) if x0 is None else np.asarray(x0, dtype=np.float64)
    x = driven_orbit(x0, d, p, n_transient, cfg=cfg).states[-1]
    u = DEFAULT_W0 / np.linalg.norm(DEFAULT_W0)
    y = x + sep * u
    total = 0.0
    dist0 = sep
    for _ in range(n_steps):
        x = driven_orbit(x, d, p, 1, cfg=cfg).states[-1]
        y = driven_orbit(y, d, p, 1, cfg=cfg).states[-1]
        dist = float(np.linalg.norm(y - x))
        if dist == 0.0:
            # collapsed below double precision: contracting direction
            return -math.inf
        if dist > cap or dist < sep * 1e-3:
            total += math.log(dist / dist0)
            y = x + (y - x) * (sep / dist)
            dist0 = sep
    total += math.log(float(np.linalg.norm(y - x)) / dist0)
    return total / (n_steps * d.T)


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRow:
    A: float
    T: float
    estimate: LyapunovEstimate | None
    error: str | None = None
    width: float = 0.0

    @property
    def classification(self) -> Response:
        return self.estimate.classification if self.estimate is not None else Response.AMBIGUOUS

    def as_record(self) -> dict:
        e = self.estimate
        return {
            "A": self.A,
            "T": self.T,
            "width": self.width,
            "lambda_hat": None if e is None else e.lambda_hat,
            "stderr": None if e is None else e.stderr,
            "n_steps": None if e is None else e.n_steps,
            "class": self.classification.value,
            "error": self.error,
        }

    @classmethod
    def from_record(cls, r: dict) -> "SweepRow":
        est = None
        if r.get("lambda_hat") not in (None, ""):
            lam, err = float(r["lambda_hat"]), float(r["stderr"])
            est = LyapunovEstimate(lam, err, int(r["n_steps"]), classify(lam, err))
        return cls(float(r["A"]), float(r["T"]), est, r.get("error") or None, float(r.get("width") or 0.0))


def _kick(A: float, width: float) -> KickSpec:
    return KickSpec(A, Box(width) if width > 0 else Impulse())


def sweep_cell(A: float, T: float, p: HHParams = HHParams(), width: float = 0.0,
               n_steps: int = 1000, n_transient: int = 100, x0=None,
               cfg: IntegratorConfig = DRIVE_CONFIG) -> SweepRow:
    """One (A, T) cell; numerical failures are captured in the row."""
    try:
        est = lambda_max(DriveConfig(_kick(A, width), T), p, n_steps, n_transient, x0=x0, cfg=cfg)
        return SweepRow(A, T, est, None, width)
    except (OrbitEscaped, FloatingPointError) as exc:
        return SweepRow(A, T, None, f"{type(exc).__name__}: {exc}", width)


def _cell_task(args):
    A, T, p, w, n_steps, n_transient, cfg = args
    return sweep_cell(A, T, p, w, n_steps, n_transient, cfg=cfg)


def run_cells(cells: Sequence[tuple], p: HHParams = HHParams(), n_steps: int = 1000,
              n_transient: int = 100, jobs: int = 1, cfg: IntegratorConfig = DRIVE_CONFIG,
              on_result=None) -> list[SweepRow]:
    """Evaluate ``(A, T, width)`` cells, optionally in a process pool.

    Results come back in input order and do not depend on ``jobs``.
    ``on_result(row)`` is called as each row completes (used for resume
    manifests).
    """
    tasks = [(float(A), float(T), p, float(w), n_steps, n_transient, cfg) for A, T, w in cells]
    if jobs <= 1 or len(tasks) <= 1:
        rows = []
        for t in tasks:
            rows.append(_cell_task(t))
            if on_result is not None:
                on_result(rows[-1])
        return rows
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        rows = []
        for r in ex.map(_cell_task, tasks):
            rows.append(r)
            if on_result is not None:
                on_result(r)
        return rows


def sweep(A: float, T_grid: Iterable[float], p: HHParams = HHParams(), width: float = 0.0,
          n_steps: int = 1000, n_transient: int = 100, jobs: int = 1,
          cfg: IntegratorConfig = DRIVE_CONFIG) -> list[SweepRow]:
    """Lyapunov estimates along a grid of drive periods at fixed amplitude."""
    grid = [float(T) for T in T_grid]
    if not grid:
        raise ValueError("empty T grid")
    return run_cells([(A, T, width) for T in grid], p, n_steps, n_transient, jobs, cfg)


def period_grid(T0: float, n: int, lo: float = 1.0, hi: float = 8.0) -> np.ndarray:
    """Uniform grid of ``n`` drive periods on ``[lo T0, hi T0]``."""
    return np.linspace(lo * T0, hi * T0, n)


@dataclass(frozen=True)
class ResponseProbabilities:
    A: float
    p_chaos: float
    p_entrain: float
    p_rotation: float
    p_ambiguous: float
    n_cells: int
    n_failed: int = 0
    width: float = 0.0

    @classmethod
    def from_rows(cls, rows: Sequence[SweepRow]) -> "ResponseProbabilities":
        if not rows:
            raise ValueError("no rows")
        n = len(rows)
        counts = {r: 0 for r in Response}
        for row in rows:
            counts[row.classification] += 1
        fr = {r: counts[r] / n for r in Response}
        return cls(rows[0].A, fr[Response.CHAOS], fr[Response.ENTRAINMENT], fr[Response.ROTATION],
                   fr[Response.AMBIGUOUS], n, sum(r.error is not None for r in rows), rows[0].width)

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def by_class(self) -> dict:
        return {
            Response.CHAOS: self.p_chaos,
            Response.ENTRAINMENT: self.p_entrain,
            Response.ROTATION: self.p_rotation,
            Response.AMBIGUOUS: self.p_ambiguous,
        }


def response_probabilities(A: float, n_grid: int, p: HHParams = HHParams(), T0: float | None = None,
                           width: float = 0.0, jobs: int = 1, n_steps: int = 1000,
                           cfg: IntegratorConfig = DRIVE_CONFIG) -> ResponseProbabilities:
    """Class fractions over a uniform grid of ``n_grid`` periods in [T0, 8 T0].
    Failed cells count as ambiguous."""
    if n_grid < 50:
        raise ValueError("n_grid must be at least 50")
    if T0 is None:
        from .cycle import cycle_period
        T0 = cycle_period(p)
    rows = sweep(A, period_grid(T0, n_grid), p, width, n_steps=n_steps, jobs=jobs, cfg=cfg)
    return ResponseProbabilities.from_rows(rows)


def pulse_duration_study(A: float, t0_list: Sequence[float], n_grid: int, p: HHParams = HHParams(),
                         T0: float | None = None, jobs: int = 1, n_steps: int = 1000,
                         cfg: IntegratorConfig = DRIVE_CONFIG) -> list[ResponseProbabilities]:
    """Probabilities for charge-matched box pulses of each width."""
    if T0 is None:
        from .cycle import cycle_period
        T0 = cycle_period(p)
    out = []
    for t0 in t0_list:
        if not t0 < T0:
            raise ValueError("pulse width must be shorter than every drive period")
        out.append(response_probabilities(A, n_grid, p, T0, width=float(t0), jobs=jobs,
                                          n_steps=n_steps, cfg=cfg))
    return out


# ---------------------------------------------------------------------------
# autocovariance


def autocovariance(series, max_lag: int, normalize: bool = False, strict: bool = True) -> np.ndarray:
    """Empirical C(n) = <x_{k+n} x_k> - <x>^2 for n = 0..max_lag."""
    x = np.asarray(series, dtype=np.float64)
    if strict and x.size < 10 * max_lag:
        raise ValueError("series must be at least 10 * max_lag long")
    mu = x.mean()
    N = x.size
    c = np.array([np.dot(x[n:], x[:N - n]) / (N - n) - mu * mu for n in range(max_lag + 1)])
    # exact zero for constant input, not rounding residue
    if np.ptp(x) == 0.0:
        c[:] = 0.0
    if normalize:
        if c[0] == 0.0:
            return np.zeros_like(c)
        c = c / c[0]
    return c


# ---------------------------------------------------------------------------
# io


SWEEP_COLUMNS = ["A", "T", "width", "lambda_hat", "stderr", "n_steps", "class", "error"]


def write_sweep_csv(rows: Sequence[SweepRow], path, header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            rec = r.as_record()
            w.writerow({k: ("" if rec[k] is None else rec[k]) for k in SWEEP_COLUMNS})


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [SweepRow.from_record(r) for r in csv.DictReader(lines)]


def write_sweep_json(rows: Sequence[SweepRow], path, header: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump({"meta": header or {}, "rows": [r.as_record() for r in rows]}, fh, indent=1)
