"""Command-line front end.

Configuration is resolved as built-in defaults < config file < environment
(``HHKICK_<SECTION>_<KEY>``) < command-line flags, validated in full before
anything touches the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .cycle import CYCLE_CONFIG, PHASE_CONFIG, cycle_period, find_limit_cycle
from .forcing import Box, DriveConfig, Impulse, KickSpec, OrbitEscaped, cycle_seed, driven_orbit, driven_trace
from .models import HHParams, hh_rhs
from .numerics import IntegrationError, IntegratorConfig, NoConvergence, integrate
from .prc import (
    NoMinimumInBracket,
    compute_prc,
    detect_horseshoe,
    find_A_crit,
    lift_critical_points,
    plateau_sink_probability,
    prc_factors,
)
from .response import (
    Response,
    ResponseProbabilities,
    SweepRow,
    autocovariance,
    run_cells,
    write_sweep_csv,
    write_sweep_json,
)

log = logging.getLogger("hhkick")

ENV_PREFIX = "HHKICK_"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MIN_COMPLETE = 0.95
SPIKE_LEVEL = -50.0  # mV; spikes are downward in this sign convention
LOCK_NAME = ".hhkick.lock"
MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration schema

def _opt_float(s):
    return None if str(s).strip().lower() in ("", "none") else float(s)


def _opt_int(s):
    return None if str(s).strip().lower() in ("", "none") else int(s)


def _float_list(s):
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    items = [x for x in str(s).replace(" ", "").split(",") if x]
    if not items:
        raise ValueError("empty list")
    return [float(x) for x in items]


def _bool(s):
    if isinstance(s, bool):
        return s
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_HH = HHParams()
_DRIVE_TOL = IntegratorConfig(abs_tolerance=1e-6, initial_step=1e-3, max_step=0.5, min_step=1e-12)

SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {f.name: (float, getattr(_HH, f.name)) for f in fields(HHParams)},
    "drive": {
        "amplitude": (_float_list, [10.0]),
        "t_min": (_opt_float, None),
        "t_max": (_opt_float, None),
        "grid": (int, 100),
        "pulse_width": (float, 0.0),
        "period": (_opt_float, None),
        "n_steps": (int, 1000),
        "n_transient": (int, 100),
        "duration": (float, 100.0),
        "dt_out": (float, 0.01),
    },
    "integrator": {
        "abs_tolerance": (float, _DRIVE_TOL.abs_tolerance),
        "initial_step": (float, _DRIVE_TOL.initial_step),
        "max_step": (float, _DRIVE_TOL.max_step),
        "min_step": (float, _DRIVE_TOL.min_step),
    },
    "run": {
        "out": (str, "hhkick-out"),
        "jobs": (int, os.cpu_count() or 1),
        "resume": (_bool, False),
        "seed": (_opt_int, None),
    },
    "prc": {
        "delta": (float, 0.1),
        "n_initial": (int, 128),
        "max_levels": (int, 20),
        "factor_points": (int, 32),
        "sink_periods": (int, 40),
        "interval_lo": (float, 4.0),
        "interval_hi": (float, 10.0),
        "horseshoe_periods": (_float_list, [81.0]),
        "find_acrit": (_bool, False),
        "bracket_lo": (float, 12.0),
        "bracket_hi": (float, 15.0),
    },
    "autocov": {
        "max_lag": (int, 50),
        "n_iter": (int, 20000),
        "normalize": (_bool, True),
    },
}

@dataclass
class RunConfig:
    """Fully resolved, validated settings for one command."""

    values: dict

    def __getitem__(self, key):
        sec, k = key.split(".")
        return self.values[sec][k]

    @property
    def params(self) -> HHParams:
        return HHParams(**self.values["model"])

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(**self.values["integrator"])

    @property
    def out(self) -> Path:
        return Path(self["run.out"])

    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()

    def cell_digest(self) -> str:
        """Hash of everything a single sweep cell depends on."""
        d = self.values["drive"]
        blob = json.dumps({"model": self.values["model"], "integrator": self.values["integrator"],
                           "n_steps": d["n_steps"], "n_transient": d["n_transient"]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def header(self, command: str) -> dict:
        tol = self.integrator
        return {
            "tool": "hhkick",
            "version": __version__,
            "command": command,
            "config_sha256": self.digest(),
            "drive_tolerance": f"{tol.abs_tolerance!r} h0={tol.initial_step!r} "
                               f"hmax={tol.max_step!r} hmin={tol.min_step!r}",
            "cycle_tolerance": repr(CYCLE_CONFIG.abs_tolerance),
            "phase_tolerance": repr(PHASE_CONFIG.abs_tolerance),
            "config": json.dumps(self.values, sort_keys=True, default=repr),
        }


def _coerce(section: str, key: str, raw, origin: str):
    if section not in SCHEMA:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{origin}: unknown key '{key}' in [{section}]")
    conv = SCHEMA[section][key][0]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: bad value for {section}.{key}: {raw!r} ({exc})") from None


def _read_file(path: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    out: dict = {}
    for sec in cp.sections():
        for key, raw in cp.items(sec):
            out.setdefault(sec, {})[key] = _coerce(sec, key, raw, path)
    return out


def _read_env(env) -> dict:
    out: dict = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        sec, _, key = rest.partition("_")
        sec, key = sec.lower(), key
        if sec == "model":
            match = {k.lower(): k for k in SCHEMA["model"]}.get(key.lower())
            key = match or key
        else:
            key = key.lower()
        out.setdefault(sec, {})[key] = _coerce(sec, key, raw, f"env {name}")
    return out


_FLAG_KEYS = {
    "amplitude": "drive.amplitude",
    "t_min": "drive.t_min",
    "t_max": "drive.t_max",
    "grid": "drive.grid",
    "pulse_width": "drive.pulse_width",
    "period": "drive.period",
    "duration": "drive.duration",
    "delta": "prc.delta",
    "find_acrit": "prc.find_acrit",
    "resume": "run.resume",
    "jobs": "run.jobs",
    "seed": "run.seed",
    "out": "run.out",
}


def _flag_overrides(ns: argparse.Namespace) -> dict:
    out: dict = {}
    for attr, dotted in _FLAG_KEYS.items():
        val = getattr(ns, attr, None)
        if val is None or val is False:
            continue
        sec, key = dotted.split(".")
        out.setdefault(sec, {})[key] = _coerce(sec, key, val, f"--{attr.replace('_', '-')}")
    for item in getattr(ns, "set", None) or []:
        dotted, eq, raw = item.partition("=")
        sec, dot, key = dotted.partition(".")
        if not eq or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out.setdefault(sec, {})[key] = _coerce(sec, key, raw, "--set")
    return out


def resolve_config(ns: argparse.Namespace, env=None) -> RunConfig:
    values = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}
    layers = []
    if getattr(ns, "config", None):
        layers.append(_read_file(ns.config))
    layers.append(_read_env(os.environ if env is None else env))
    layers.append(_flag_overrides(ns))
    for layer in layers:
        for sec, kv in layer.items():
            values[sec].update(kv)
    cfg = RunConfig(values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    v = cfg.values
    m = v["model"]
    if not all(math.isfinite(x) for x in m.values()):
        raise ConfigError("model parameters must be finite")
    if m["C"] <= 0 or min(m["g_Na"], m["g_K"], m["g_leak"]) < 0:
        raise ConfigError("capacitance must be positive and conductances non-negative")
    d = v["drive"]
    if not all(math.isfinite(a) for a in d["amplitude"]):
        raise ConfigError("amplitudes must be finite")
    for k in ("t_min", "t_max", "period"):
        if d[k] is not None and not d[k] > 0:
            raise ConfigError(f"drive.{k} must be positive")
    if d["t_min"] is not None and d["t_max"] is not None and d["t_min"] > d["t_max"]:
        raise ConfigError("drive.t_min exceeds drive.t_max")
    if d["grid"] < 1:
        raise ConfigError("drive.grid must be >= 1")
    if d["pulse_width"] < 0:
        raise ConfigError("drive.pulse_width must be >= 0")
    shortest = min(x for x in (d["t_min"], d["period"], math.inf) if x is not None)
    if d["pulse_width"] >= shortest:
        raise ConfigError("drive.pulse_width must be shorter than every drive period")
    if d["n_steps"] < 10 or d["n_transient"] < 0:
        raise ConfigError("drive.n_steps must be >= 10 and n_transient >= 0")
    if d["duration"] <= 0 or d["dt_out"] <= 0 or d["dt_out"] > d["duration"]:
        raise ConfigError("drive.duration and dt_out must be positive with dt_out <= duration")
    it = v["integrator"]
    if not all(x > 0 for x in it.values()) or it["min_step"] > it["max_step"]:
        raise ConfigError("integrator settings must be positive with min_step <= max_step")
    if v["run"]["jobs"] < 1:
        raise ConfigError("run.jobs must be >= 1")
    pr = v["prc"]
    if pr["delta"] <= 0 or pr["n_initial"] < 4 or pr["max_levels"] < 0:
        raise ConfigError("prc.delta > 0, n_initial >= 4, max_levels >= 0 required")
    if pr["factor_points"] < 0 or pr["sink_periods"] < 10:
        raise ConfigError("prc.factor_points >= 0 and prc.sink_periods >= 10 required")
    if not pr["interval_lo"] < pr["interval_hi"] or not pr["bracket_lo"] < pr["bracket_hi"]:
        raise ConfigError("prc intervals must have lo < hi")
    if any(T <= 0 for T in pr["horseshoe_periods"]):
        raise ConfigError("prc.horseshoe_periods must be positive")
    ac = v["autocov"]
    if ac["max_lag"] < 1 or ac["n_iter"] < 10 * ac["max_lag"]:
        raise ConfigError("autocov.n_iter must be at least 10 * max_lag")


# ---------------------------------------------------------------------------
# output helpers


@contextmanager
def output_lock(out: Path):
    """Exclusive claim on an output directory; stale locks from dead
    processes are taken over.  A directory created here is removed again
    if the command stops on a config error before writing anything."""
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise ConfigError(f"{out} is in use by process {pid}") from None
            lock.unlink(missing_ok=True)
    else:
        raise ConfigError(f"cannot lock {out}")
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    except ConfigError:
        lock.unlink(missing_ok=True)
        if created and not any(out.iterdir()):
            out.rmdir()
        raise
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _write_json(path: Path, payload: dict, header: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump({"meta": header, **payload}, fh, indent=1, default=_jsonable)
    os.replace(tmp, path)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Response):
        return x.value
    raise TypeError(type(x))


def _write_csv(path: Path, columns, rows, header: dict) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _tag(A: float) -> str:
    return f"A{A:g}".replace(".", "p").replace("-", "m").replace("+", "")


def _kick(A: float, width: float) -> KickSpec:
    return KickSpec(A, Box(width) if width > 0 else Impulse())


# ---------------------------------------------------------------------------
# commands


def spike_times(t, v, level: float = SPIKE_LEVEL) -> np.ndarray:
    """Times of downward spikes: the v-minimum of each excursion below
    ``level``, refined by a parabola through the three samples."""
    below = v < level
    edges = np.diff(below.astype(np.int8))
    starts = np.nonzero(edges == 1)[0] + 1
    ends = np.nonzero(edges == -1)[0] + 1
    # an excursion already under way at t = 0 has no rising edge and is dropped
    out = []
    for s in starts:
        e = ends[ends > s]
        if e.size == 0:
            break
        j = s + int(np.argmin(v[s:e[0]]))
        if 0 < j < v.size - 1:
            y0, y1, y2 = v[j - 1], v[j], v[j + 1]
            den = y0 - 2 * y1 + y2
            off = 0.5 * (y0 - y2) / den if den != 0 else 0.0
            out.append(t[j] + off * (t[1] - t[0]))
    return np.array(out)


def cmd_simulate(cfg: RunConfig) -> int:
    p, tol = cfg.params, cfg.integrator
    d = cfg.values["drive"]
    if any(A != 0 for A in d["amplitude"]) and d["period"] is None:
        raise ConfigError("simulate with a nonzero amplitude needs drive.period")
    x0 = cycle_seed(p)
    seed = cfg["run.seed"]
    if seed is not None:
        # random start along the attractor
        shift = np.random.default_rng(seed).uniform(0.0, 20.0)
        x0 = integrate(hh_rhs, x0, shift, cfg=tol, p=p.pack())
    hdr = cfg.header("simulate")
    out = cfg.out
    with output_lock(out):
        summary = {}
        for A in d["amplitude"]:
            T = d["period"] if d["period"] is not None else d["duration"]
            drive = DriveConfig(_kick(A, d["pulse_width"]), T)
            try:
                t, ys = driven_trace(x0, drive, p, d["duration"], d["dt_out"], tol)
            except (IntegrationError, OrbitEscaped) as exc:
                raise NumericalFailure(f"A={A}: {exc}") from exc
            tag = _tag(A)
            _write_csv(out / f"trace_{tag}.csv", ["t", "v", "m", "n", "h"],
                       (np.concatenate([[ti], yi]) for ti, yi in zip(t, ys)), hdr)
            sp = spike_times(t, ys[:, 0])
            isi = np.diff(sp)
            rec = {
                "amplitude": A,
                "drive_period": d["period"],
                "spike_count": int(sp.size),
                "spike_times": sp,
                "period_estimate": float(isi.mean()) if isi.size else None,
                "isi_std": float(isi.std()) if isi.size > 1 else None,
            }
            if d["period"] is not None:
                n = max(1, int(d["duration"] // d["period"]))
                try:
                    orb = driven_orbit(x0, drive, p, n, cfg=tol)
                except (IntegrationError, OrbitEscaped) as exc:
                    raise NumericalFailure(f"A={A}: {exc}") from exc
                _write_csv(out / f"map_{tag}.csv", ["k", "v", "m", "n", "h"],
                           ([k, *x] for k, x in enumerate(orb.states)), hdr)
                rec["spikes_per_drive"] = sp.size / n
            summary[tag] = rec
            log.info("A=%g: %d spikes, ISI %s", A, sp.size, rec["period_estimate"])
        _write_json(out / "simulate_summary.json", {"runs": summary}, hdr)
    return EXIT_OK


def _cell_key(A, T, w) -> str:
    return f"{float(A)!r}|{float(T)!r}|{float(w)!r}"


def _period_axis(cfg: RunConfig, T0_cache: dict) -> np.ndarray:
    d = cfg.values["drive"]
    if d["t_min"] is not None and d["t_max"] is not None:
        return np.linspace(d["t_min"], d["t_max"], d["grid"])
    if "T0" not in T0_cache:
        T0_cache["T0"] = cycle_period(cfg.params)
    T0 = T0_cache["T0"]
    lo = d["t_min"] if d["t_min"] is not None else T0
    hi = d["t_max"] if d["t_max"] is not None else 8 * T0
    if lo > hi:
        raise ConfigError(f"T range [{lo}, {hi}] is empty")
    return np.linspace(lo, hi, d["grid"])


def _sweep_rows(cfg: RunConfig, command: str):
    """Run (or resume) every (A, T) cell; returns rows grouped by amplitude
    plus the T axis."""
    d = cfg.values["drive"]
    out = cfg.out
    T0_cache: dict = {}
    Ts = _period_axis(cfg, T0_cache)
    if d["pulse_width"] > 0 and d["pulse_width"] >= Ts.min():
        raise ConfigError("drive.pulse_width must be shorter than every drive period")
    w = d["pulse_width"]
    cells = [(A, float(T), w) for A in d["amplitude"] for T in Ts]
    mpath = out / MANIFEST_NAME
    key = cfg.cell_digest()
    done: dict = {}
    if cfg["run.resume"] and mpath.exists():
        try:
            man = json.loads(mpath.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"unreadable manifest {mpath}: {exc}") from None
        if man.get("config_key") != key:
            raise ConfigError("manifest was written with different settings; drop --resume")
        done = {k: SweepRow.from_record(r) for k, r in man.get("cells", {}).items()}
    todo = [c for c in cells if _cell_key(*c) not in done]
    log.info("%s: %d cells, %d cached, %d to run", command, len(cells), len(cells) - len(todo), len(todo))
    hdr = cfg.header(command)

    def save():
        _write_json(mpath, {"config_key": key,
                            "cells": {k: r.as_record() for k, r in done.items()}}, hdr)

    def record(row: SweepRow):
        done[_cell_key(row.A, row.T, row.width)] = row
        save()

    run_cells(todo, cfg.params, d["n_steps"], d["n_transient"], cfg["run.jobs"], cfg.integrator,
              on_result=record)
    save()
    rows = [done[_cell_key(*c)] for c in cells]
    return rows, Ts, hdr


def _completion_check(rows) -> None:
    failed = [r for r in rows if r.error is not None]
    for r in failed:
        log.warning("cell A=%g T=%g failed: %s", r.A, r.T, r.error)
    frac = 1.0 - len(failed) / max(1, len(rows))
    if frac < MIN_COMPLETE:
        raise NumericalFailure(f"only {frac:.1%} of cells completed")


PROB_COLUMNS = ["A", "width", "n_cells", "n_failed", "p_chaos", "p_entrain", "p_rotation", "p_ambiguous"]


def _write_probabilities(out: Path, rows, amplitudes, hdr) -> list[ResponseProbabilities]:
    table = []
    for A in amplitudes:
        sub = [r for r in rows if r.A == A]
        table.append(ResponseProbabilities.from_rows(sub))
    _write_csv(out / "probabilities.csv", PROB_COLUMNS,
               ([getattr(pr, c) for c in ["A", "width", "n_cells", "n_failed", "p_chaos", "p_entrain",
                                          "p_rotation", "p_ambiguous"]] for pr in table), hdr)
    _write_json(out / "probabilities.json", {"table": [pr.as_dict() for pr in table]}, hdr)
    return table


def cmd_sweep(cfg: RunConfig) -> int:
    out = cfg.out
    with output_lock(out):
        rows, _, hdr = _sweep_rows(cfg, "sweep")
        for A in cfg["drive.amplitude"]:
            sub = [r for r in rows if r.A == A]
            write_sweep_csv(sub, out / f"sweep_{_tag(A)}.csv", hdr)
            write_sweep_json(sub, out / f"sweep_{_tag(A)}.json", hdr)
        _write_probabilities(out, rows, cfg["drive.amplitude"], hdr)
        _completion_check(rows)
    return EXIT_OK


def cmd_probabilities(cfg: RunConfig) -> int:
    out = cfg.out
    with output_lock(out):
        rows, _, hdr = _sweep_rows(cfg, "probabilities")
        for pr in _write_probabilities(out, rows, cfg["drive.amplitude"], hdr):
            log.info("A=%g chaos %.3f entrain %.3f rotation %.3f ambiguous %.3f",
                     pr.A, pr.p_chaos, pr.p_entrain, pr.p_rotation, pr.p_ambiguous)
        _completion_check(rows)
    return EXIT_OK


def cmd_autocov(cfg: RunConfig) -> int:
    d, ac = cfg.values["drive"], cfg.values["autocov"]
    if d["period"] is None:
        raise ConfigError("autocov needs drive.period")
    p, tol = cfg.params, cfg.integrator
    x0 = cycle_seed(p)
    seed = cfg["run.seed"]
    if seed is not None:
        x0 = integrate(hh_rhs, x0, np.random.default_rng(seed).uniform(0.0, 20.0), cfg=tol, p=p.pack())
    hdr = cfg.header("autocov")
    out = cfg.out
    with output_lock(out):
        summary = {}
        for A in d["amplitude"]:
            drive = DriveConfig(_kick(A, d["pulse_width"]), d["period"])
            n = d["n_transient"] + ac["n_iter"]
            try:
                orb = driven_orbit(x0, drive, p, n, cfg=tol)
            except (IntegrationError, OrbitEscaped) as exc:
                raise NumericalFailure(f"A={A}: {exc}") from exc
            v = orb.states[d["n_transient"] + 1:, 0]
            C = autocovariance(v, ac["max_lag"], normalize=ac["normalize"])
            _write_csv(out / f"autocov_{_tag(A)}.csv", ["lag", "C_vv"], enumerate(C), hdr)
            summary[_tag(A)] = {"amplitude": A, "mean_v": float(v.mean()), "var_v": float(v.var())}
        _write_json(out / "autocov_summary.json", {"runs": summary}, hdr)
    return EXIT_OK


def _acrit(cfg: RunConfig, c) -> dict:
    pr = cfg.values["prc"]
    try:
        A, obj = find_A_crit((pr["bracket_lo"], pr["bracket_hi"]), c)
    except NoMinimumInBracket as exc:
        return {"A_crit": None, "error": str(exc)}
    return {"A_crit": A, "objective": obj}


def cmd_acrit(cfg: RunConfig) -> int:
    hdr = cfg.header("acrit")
    out = cfg.out
    with output_lock(out):
        c = _cycle(cfg)
        res = _acrit(cfg, c)
        _write_json(out / "acrit.json", res, hdr)
        if res["A_crit"] is None:
            raise NumericalFailure(res["error"])
        log.info("A_crit = %.6f (objective %.3g)", res["A_crit"], res["objective"])
    return EXIT_OK


def _cycle(cfg: RunConfig):
    try:
        return find_limit_cycle(cfg.params)
    except (IntegrationError, NoConvergence, RuntimeError) as exc:
        raise NumericalFailure(f"limit cycle: {exc}") from exc


def cmd_prc(cfg: RunConfig) -> int:
    pr = cfg.values["prc"]
    hdr = cfg.header("prc")
    out = cfg.out
    with output_lock(out):
        c = _cycle(cfg)
        diag = {"T0": c.T0}
        any_ok = False
        for A in cfg["drive.amplitude"]:
            tag = _tag(A)
            curve = compute_prc(A, c, pr["delta"], pr["n_initial"], pr["max_levels"], cfg["run.jobs"])
            curve.to_csv(out / f"prc_{tag}.csv", hdr)
            good = int(curve.ok.sum())
            any_ok |= good > 0
            entry = {
                "amplitude": A,
                "n_points": int(curve.grid.size),
                "n_lost": int(curve.grid.size - good),
                "winding": curve.winding,
                "frontier": [list(ab) for ab in curve.frontier],
                "max_gap": curve.max_gap(),
            }
            if good > 1:
                entry["critical_points"] = lift_critical_points(curve)
                interval = (pr["interval_lo"], pr["interval_hi"])
                entry["sink_probability"] = plateau_sink_probability(curve, pr["sink_periods"], interval)
                entry["sink_interval"] = list(interval)
                entry["horseshoes"] = {repr(T): [list(ab) for ab in detect_horseshoe(curve, T)]
                                       for T in pr["horseshoe_periods"]}
            if pr["factor_points"] > 0:
                phases = np.linspace(0.0, c.T0, pr["factor_points"], endpoint=False)
                try:
                    prc_factors(A, c, phases).to_csv(out / f"factors_{tag}.csv", hdr)
                except (IntegrationError, NoConvergence, RuntimeError) as exc:
                    entry["factor_error"] = str(exc)
            diag[tag] = entry
            log.info("A=%g: %d points, winding %d", A, curve.grid.size, curve.winding)
        if pr["find_acrit"]:
            diag["acrit"] = _acrit(cfg, c)
        _write_json(out / "prc_diagnostics.json", diag, hdr)
        if not any_ok:
            raise NumericalFailure("no phase survived the kick for any amplitude")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "prc": cmd_prc,
    "probabilities": cmd_probabilities,
    "autocov": cmd_autocov,
    "acrit": cmd_acrit,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hhkick", description="Pulse-driven Hodgkin-Huxley analysis.")
    ap.add_argument("--version", action="version", version=f"hhkick {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--amplitude", metavar="A[,A...]")
        sp.add_argument("--t-min", dest="t_min", metavar="MS")
        sp.add_argument("--t-max", dest="t_max", metavar="MS")
        sp.add_argument("--grid")
        sp.add_argument("--pulse-width", dest="pulse_width", metavar="MS")
        sp.add_argument("--period", metavar="MS")
        sp.add_argument("--duration", metavar="MS")
        sp.add_argument("--delta")
        sp.add_argument("--resume", action="store_true")
        sp.add_argument("--jobs", metavar="N")
        sp.add_argument("--seed")
        sp.add_argument("--find-acrit", dest="find_acrit", action="store_true")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None, env=None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(ns, env)
        return COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        print(f"hhkick: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, IntegrationError, NoConvergence, OrbitEscaped) as exc:
        print(f"hhkick: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
