"""Command-line front end: ``iot-uplink {analyze,frontier,simulate,validate}``.

Configuration is TOML with units in the key names.  Example::

    [params]
    bandwidth_mhz = 10      # optional preset for q_blocks / n_chan
    alpha = 100
    arrival = 0.1
    rho_dbm = -90
    noise_dbm = -90

    [analyze]
    schemes = ["SC-UL", "RA-UL"]
    axis = "alpha"
    values = [50, 100, 200]

Exit codes: 0 ok, 1 configuration error, 2 numerical/solver error,
3 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import solver
from .errors import ModelError
from .simulator import (DEFAULT_TOLERANCES, MIN_GUARD, OBSERVE_RADIUS, REGION_HALF_WIDTH, compare_to_analysis,
                        simulate)
from .spatial import SystemParams, db_to_linear, dbm_to_watts

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VALIDATION = 0, 1, 2, 3

ANALYZE_COLUMNS = ["alpha", "a", "scheme", "stable", "margin", "p_ra", "p_aval", "p_tx_or_p", "x0",
                   "mean_queue", "wait_mean", "wait_var", "dispersion", "iterations"]
FRONTIER_COLUMNS = ["scheme", "alpha", "a_star"]
SIMULATE_COLUMNS = ["scheme", "alpha", "a", "seeds", "slots", "p_ra", "p_ra_se", "p_aval", "p_aval_se",
                    "p_tx", "p_tx_se", "p", "p_se", "mean_queue", "mean_queue_se", "wait_mean",
                    "wait_mean_se", "dispersion", "overflow"]
VALIDATE_COLUMNS = ["scheme", "alpha", "metric", "simulated", "se", "analytic", "gap", "z",
                    "tolerance", "passed"]

# config key -> (SystemParams field, converter)
_PARAM_KEYS = {
    "bs_intensity_per_km2": ("bs_intensity", float),
    "device_intensity_per_km2": ("device_intensity", float),
    "alpha": ("alpha", float),
    "eta": ("eta", float),
    "arrival": ("arrival", float),
    "rho_dbm": ("rho", dbm_to_watts),
    "noise_dbm": ("noise", dbm_to_watts),
    "theta_sr_db": ("theta_sr", db_to_linear),
    "theta_tx_db": ("theta_tx", db_to_linear),
    "theta_ul_db": ("theta_ul", db_to_linear),
    "n_zc": ("n_zc", int),
    "n_chan": ("n_chan", int),
    "q_blocks": ("q_blocks", int),
    "n_slots": ("n_slots", int),
    "cell_const": ("cell_const", float),
    "tail_eps": ("tail_eps", float),
}
_SECTIONS = {
    "params": set(_PARAM_KEYS) | {"bandwidth_mhz"},
    "analyze": {"schemes", "axis", "values", "eps", "max_iter"},
    "frontier": {"schemes", "alpha_grid", "a_tol"},
    "simulate": {"schemes", "alphas", "slots", "warmup", "seeds", "seed_base",
                 "region_half_width_km", "tx_interference"},
    "validate": {"tolerances"},
    "output": {"path"},
}
# sweep axes named by config key are mapped to the SystemParams field and unit
_AXES = {k: v for k, v in _PARAM_KEYS.items()}


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    params: SystemParams
    schemes: list = field(default_factory=lambda: list(solver.SCHEMES))
    axis: str = "alpha"
    values: list = field(default_factory=list)
    eps: float = solver.EPS
    max_iter: int = solver.MAX_ITER
    frontier_schemes: list = field(default_factory=lambda: list(solver.SCHEMES))
    alpha_grid: list = field(default_factory=list)
    a_tol: float = 1e-3
    sim_schemes: list = field(default_factory=lambda: list(solver.SCHEMES))
    sim_alphas: list = field(default_factory=list)
    slots: int = 3000
    warmup: int = 1000
    seeds: int = 2
    seed_base: int = 0
    region_half_width: float = REGION_HALF_WIDTH
    tx_interference: str = "saturated"
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    output: Optional[str] = None


def _schemes(value, where):
    if not isinstance(value, list) or any(s not in solver.SCHEMES for s in value):
        raise ConfigError(f"{where}: expected a list drawn from {list(solver.SCHEMES)}, got {value!r}")
    return list(value)


def _numbers(value, where):
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
    return list(value)


def _scalar(section, body, key, default, kind=float, positive=True):
    if key not in body:
        return default
    value = body[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (kind is int and int(value) != value):
        raise ConfigError(f"[{section}] {key}: expected {'an integer' if kind is int else 'a number'}, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"[{section}] {key}: must be positive, got {value!r}")
    return kind(value)


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax: {exc}") from None
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in body:
            if key not in _SECTIONS[section] and not (section == "validate" and key == "tolerances"):
                raise ConfigError(f"[{section}] unknown key {key!r}")

    p = raw.get("params", {})
    fields = {}
    alpha = None
    try:
        if "bandwidth_mhz" in p:
            base = SystemParams.reference_scenario(bandwidth_mhz=p["bandwidth_mhz"])
        else:
            base = SystemParams.reference_scenario()
        for key, value in p.items():
            if key == "bandwidth_mhz":
                continue
            name, conv = _PARAM_KEYS[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[params] {key}: expected a number, got {value!r}")
            if conv is int and int(value) != value:
                raise ConfigError(f"[params] {key}: expected an integer, got {value!r}")
            if name == "alpha":
                alpha = float(value)
            else:
                fields[name] = conv(value)
        if alpha is not None and "device_intensity" in fields:
            raise ConfigError("[params] give either alpha or device_intensity_per_km2, not both")
        params = base.replace(**fields)
        if alpha is not None:
            params = params.with_alpha(alpha)
    except ModelError as exc:
        raise ConfigError(f"[params] {exc}") from None

    cfg = ExperimentConfig(params=params)
    a = raw.get("analyze", {})
    if "schemes" in a:
        cfg.schemes = _schemes(a["schemes"], "[analyze] schemes")
    if "axis" in a:
        if a["axis"] not in _AXES:
            raise ConfigError(f"[analyze] axis: unknown parameter {a['axis']!r}")
        cfg.axis = a["axis"]
    if "values" in a:
        cfg.values = _numbers(a["values"], "[analyze] values")
    cfg.eps = _scalar("analyze", a, "eps", cfg.eps)
    cfg.max_iter = _scalar("analyze", a, "max_iter", cfg.max_iter, int)

    f = raw.get("frontier", {})
    if "schemes" in f:
        cfg.frontier_schemes = _schemes(f["schemes"], "[frontier] schemes")
    if "alpha_grid" in f:
        cfg.alpha_grid = _numbers(f["alpha_grid"], "[frontier] alpha_grid")
        if any(b <= x for x, b in zip(cfg.alpha_grid, cfg.alpha_grid[1:])):
            raise ConfigError("[frontier] alpha_grid must be strictly increasing")
    cfg.a_tol = _scalar("frontier", f, "a_tol", cfg.a_tol)

    s = raw.get("simulate", {})
    if "schemes" in s:
        cfg.sim_schemes = _schemes(s["schemes"], "[simulate] schemes")
    if "alphas" in s:
        cfg.sim_alphas = _numbers(s["alphas"], "[simulate] alphas")
    for key, attr in (("slots", "slots"), ("warmup", "warmup"), ("seeds", "seeds"), ("seed_base", "seed_base")):
        if key in s:
            if isinstance(s[key], bool) or not isinstance(s[key], int) or s[key] < 0:
                raise ConfigError(f"[simulate] {key}: expected a nonnegative integer, got {s[key]!r}")
            setattr(cfg, attr, s[key])
    if not cfg.slots > cfg.warmup:
        raise ConfigError("[simulate] slots must exceed warmup")
    if cfg.seeds < 1:
        raise ConfigError("[simulate] seeds must be at least 1")
    cfg.region_half_width = _scalar("simulate", s, "region_half_width_km", cfg.region_half_width)
    if cfg.region_half_width - OBSERVE_RADIUS < MIN_GUARD:
        raise ConfigError(f"[simulate] region_half_width_km: guard ring below {MIN_GUARD} km")
    cfg.tx_interference = s.get("tx_interference", cfg.tx_interference)
    if cfg.tx_interference not in ("saturated", "scheduled"):
        raise ConfigError("[simulate] tx_interference: expected 'saturated' or 'scheduled'")

    v = raw.get("validate", {})
    if "tolerances" in v:
        tol = v["tolerances"]
        if not isinstance(tol, dict):
            raise ConfigError("[validate] tolerances must be a table")
        for k, x in tol.items():
            if k not in ("p_ra", "p_aval", "p_tx", "p", "mean_queue", "wait_mean"):
                raise ConfigError(f"[validate.tolerances] unknown metric {k!r}")
            if isinstance(x, bool) or not isinstance(x, (int, float)) or x < 0:
                raise ConfigError(f"[validate.tolerances] {k}: expected a nonnegative number")
        cfg.tolerances = {k: float(x) for k, x in tol.items()}
    cfg.output = raw.get("output", {}).get("path")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    return parse_config(text)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _axis_value(cfg: ExperimentConfig, value):
    name, conv = _AXES[cfg.axis]
    return name, conv(value)


def analyze_rows(cfg: ExperimentConfig, jobs: int = 1):
    rows, errors = [], []
    for scheme in cfg.schemes:
        if not cfg.values:
            continue
        name, _ = _AXES[cfg.axis]
        converted = [_axis_value(cfg, v)[1] for v in cfg.values]
        for raw_value, row in zip(cfg.values, solver.sweep(cfg.params, name, converted, scheme,
                                                           cfg.eps, cfg.max_iter, jobs)):
            point = cfg.params.replace(**{name: row.value})
            if row.report is None:
                errors.append(f"{scheme} {cfg.axis}={raw_value}: {row.error}")
                continue
            r = row.report
            m = r.metrics
            if r.stable and not r.converged:
                errors.append(f"{scheme} {cfg.axis}={raw_value}: fixed point did not converge in {r.iterations} iterations")
            rows.append([point.alpha, point.arrival, scheme, r.stable, r.margin, r.p_ra, r.p_aval,
                         r.p_tx_or_p, r.x0 if r.stable else None,
                         m.mean_queue_len if m else None, m.wait_mean if m else None,
                         m.wait_var if m else None, m.dispersion if m else None, r.iterations])
    return rows, errors


def cmd_analyze(cfg: ExperimentConfig, jobs: int = 1):
    rows, errors = analyze_rows(cfg, jobs)
    return (EXIT_SOLVER if errors else EXIT_OK), _csv(ANALYZE_COLUMNS, rows), errors


def cmd_frontier(cfg: ExperimentConfig, jobs: int = 1):
    rows, errors = [], []
    for scheme in cfg.frontier_schemes:
        if not cfg.alpha_grid:
            continue
        try:
            pts = solver.pareto_frontier(cfg.params, scheme, cfg.alpha_grid, cfg.a_tol, jobs)
        except ModelError as exc:
            errors.append(f"{scheme}: {type(exc).__name__}: {exc}")
            continue
        rows += [[scheme, p.alpha, p.a_star] for p in pts]
        bad = solver.frontier_violations(pts, cfg.a_tol) if scheme == solver.RAUL else []
        for i in bad:
            print(f"warning: {scheme} frontier rises between alpha={pts[i-1].alpha} and {pts[i].alpha}",
                  file=sys.stderr)
    return (EXIT_SOLVER if errors else EXIT_OK), _csv(FRONTIER_COLUMNS, rows), errors


def _seeds(cfg: ExperimentConfig):
    return list(range(cfg.seed_base, cfg.seed_base + cfg.seeds))


def _est(e):
    return (None, None) if e is None else (e.value, e.se)


def cmd_simulate(cfg: ExperimentConfig, jobs: int = 1):
    rows, errors = [], []
    for scheme in cfg.sim_schemes:
        for alpha in cfg.sim_alphas:
            point = cfg.params.with_alpha(alpha)
            try:
                st = simulate(point, scheme, cfg.slots, cfg.warmup, _seeds(cfg),
                              cfg.region_half_width, cfg.tx_interference, jobs)
            except ModelError as exc:
                errors.append(f"{scheme} alpha={alpha}: {type(exc).__name__}: {exc}")
                continue
            rows.append([scheme, float(alpha), point.arrival, cfg.seeds, cfg.slots,
                         *_est(st.p_ra_hat), *_est(st.p_aval_hat), *_est(st.p_tx_hat), *_est(st.p_hat),
                         *_est(st.mean_queue_hat), *_est(st.wait_mean_hat), st.dispersion_hat,
                         st.overflow_count])
    return (EXIT_SOLVER if errors else EXIT_OK), _csv(SIMULATE_COLUMNS, rows), errors


def cmd_validate(cfg: ExperimentConfig, jobs: int = 1):
    rows, errors, failures = [], [], []
    for scheme in cfg.sim_schemes:
        for alpha in cfg.sim_alphas:
            point = cfg.params.with_alpha(alpha)
            try:
                report = solver.solver_for(scheme)(point)
                if not report.stable:
                    failures.append(f"{scheme} alpha={alpha}: analysis reports an unstable network")
                    continue
                st = simulate(point, scheme, cfg.slots, cfg.warmup, _seeds(cfg),
                              cfg.region_half_width, cfg.tx_interference, jobs)
            except ModelError as exc:
                errors.append(f"{scheme} alpha={alpha}: {type(exc).__name__}: {exc}")
                continue
            for g in compare_to_analysis(st, report, cfg.tolerances).gaps:
                rows.append([scheme, float(alpha), g.name, g.simulated, g.se, g.analytic, g.gap, g.z,
                             g.tolerance, g.passed])
                if not g.passed:
                    failures.append(f"{scheme} alpha={alpha} {g.name}: |{g.simulated:.4f} - {g.analytic:.4f}|"
                                    f" = {g.gap:.4f} >= {g.tolerance}")
    if errors:
        code = EXIT_SOLVER
    elif failures:
        code = EXIT_VALIDATION
    else:
        code = EXIT_OK
    return code, _csv(VALIDATE_COLUMNS, rows), errors + failures


COMMANDS = {"analyze": cmd_analyze, "frontier": cmd_frontier, "simulate": cmd_simulate,
            "validate": cmd_validate}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are configuration errors, not solver failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="iot-uplink", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML configuration file")
    ap.add_argument("--out", help="CSV output path (default: config [output] path, else stdout)")
    ap.add_argument("--seeds", type=int, help="number of simulation replications")
    ap.add_argument("--jobs", type=int, help="worker processes (default: $IOT_UPLINK_JOBS or 1)")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seeds is not None:
            if args.seeds < 1:
                raise ConfigError("--seeds must be at least 1")
            cfg.seeds = args.seeds
        jobs = args.jobs if args.jobs is not None else solver.default_jobs()
        if jobs < 1:
            raise ConfigError("--jobs must be at least 1")
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code, text, messages = COMMANDS[args.command](cfg, jobs)
    except ModelError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out = args.out or cfg.output
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for m in messages:
        print(m, file=sys.stderr)
    if args.command == "validate":
        print("validation: " + ("PASS" if code == EXIT_OK else "FAIL"), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
