"""Config-driven experiment runner.

Usage::

    malliavin-mc <command> --config cfg.json [--seed N] [--paths N] [--steps N]
                 [--threads N] [--out DIR]
    malliavin-mc sweep <command> --config cfg.json --param n_steps --values 500 1000

Every run writes ``report.json`` (plus optional CSV dumps) to the output
directory. Exit codes: 0 all checks passed, 1 a check failed, 2 bad config,
3 numerical abort. Errors are reported as JSON on stderr.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from . import estimator as est
from ._backend import kernels
from .flow import PathAbort, TimeGrid, simulate_path
from .model import ModelEvaluationError, builtin_model, validate_assumptions
from .weight import WeightAbort, write_weights_csv

COMMANDS = ("verify-ibp", "moments", "weight-moments", "density", "lemma31-check",
            "perturb-check", "validate-model")
SWEEP_PARAMS = ("n_steps", "n_paths", "epsilon")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "T": 1.0,
    "n_steps": 1000,
    "n_paths": 10000,
    "f_name": "x1",
    "seed": 0,
    "threads": 1,
    "output_dir": "out",
    "overrides": {},
    "bracket": "realized",
    "noise_steps": None,
    "batch_size": 2000,
    "p_list": [2, 4],
    "q": 2.0,
    "eps_list": [1e-2, 5e-3],
    "path_index": 0,
    "eval_points": None,
    "dump_trajectory": None,
    "dump_weights": False,
    "lemma31": {},
    "validate": {},
    "perturb_envelope": 10.0,
}

KNOWN_KEYS = set(DEFAULTS) | {"model", "x0", "v", "f_names"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config

def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _int(cfg, key, minimum):
    val = cfg[key]
    _require(isinstance(val, int) and not isinstance(val, bool) and val >= minimum,
             f"{key} must be an integer >= {minimum}, got {val!r}")
    return val


def _vec(cfg, key, d):
    val = cfg.get(key)
    if val is None:
        val = [0.0] * d if key == "x0" else [1.0] + [0.0] * (d - 1)
    if isinstance(val, (int, float)):
        val = [val]
    _require(isinstance(val, list) and all(isinstance(z, (int, float)) for z in val),
             f"{key} must be a list of numbers")
    _require(len(val) == d, f"{key} has length {len(val)} but the model dimension is {d}")
    _require(all(math.isfinite(z) for z in val), f"{key} must be finite")
    return [float(z) for z in val]


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    _require(isinstance(raw, dict), "config must be a JSON object")
    return raw


def resolve_config(raw, flags=None):
    """Apply defaults and flag overrides, validate, and build the model."""
    cfg = copy.deepcopy(DEFAULTS)
    unknown = sorted(set(raw) - KNOWN_KEYS)
    _require(not unknown, f"unknown config keys: {unknown}")
    cfg.update(copy.deepcopy(raw))
    for key, val in (flags or {}).items():
        if val is not None:
            cfg[key] = val
    _require(isinstance(cfg.get("model"), dict) and "name" in cfg["model"],
             "config needs model: {name, params}")
    params = cfg["model"].get("params", {}) or {}
    _require(isinstance(params, dict), "model.params must be an object")
    try:
        model = builtin_model(cfg["model"]["name"], params)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    cfg["model"] = {"name": cfg["model"]["name"], "params": params}
    _require(isinstance(cfg["T"], (int, float)) and cfg["T"] > 0 and math.isfinite(cfg["T"]),
             "T must be a positive number")
    cfg["T"] = float(cfg["T"])
    _int(cfg, "n_steps", 1)
    _int(cfg, "n_paths", 1)
    _int(cfg, "threads", 1)
    _int(cfg, "batch_size", 1)
    _int(cfg, "seed", 0)
    _require(cfg["seed"] < 2 ** 63, "seed must be < 2**63")
    cfg["x0"] = _vec(cfg, "x0", model.d)
    cfg["v"] = _vec(cfg, "v", model.d)
    _require(cfg["bracket"] in ("realized", "expected"), "bracket must be realized or expected")
    if cfg["noise_steps"] is not None:
        _int(cfg, "noise_steps", 1)
        _require(cfg["noise_steps"] % cfg["n_steps"] == 0,
                 "noise_steps must be a multiple of n_steps")
    fnames = cfg.get("f_names") or [cfg["f_name"]]
    _require(isinstance(fnames, list) and fnames, "f_names must be a non-empty list")
    for name in fnames:
        _require(name in est.available_test_functions(), f"unknown test function {name!r}")
    cfg["f_names"] = list(fnames)
    ov = cfg["overrides"]
    _require(isinstance(ov, dict), "overrides must be an object")
    bad = sorted(set(ov) - {"bandwidth", "z_threshold", "C_q"})
    _require(not bad, f"unknown overrides: {bad}")
    if "z_threshold" in ov:
        _require(isinstance(ov["z_threshold"], (int, float)) and ov["z_threshold"] > 0,
                 "z_threshold must be positive")
    if "C_q" in ov:
        _require(isinstance(ov["C_q"], (int, float)) and ov["C_q"] >= 0, "C_q must be >= 0")
    if "bandwidth" in ov:
        bw = ov["bandwidth"]
        bws = bw if isinstance(bw, list) else [bw]
        _require(all(isinstance(z, (int, float)) and z > 0 for z in bws),
                 "bandwidth must be positive")
    return cfg, model


def _options(cfg):
    return est.RunOptions(cfg["threads"], cfg["batch_size"], cfg["bracket"], cfg["noise_steps"])


def _grid(cfg):
    return TimeGrid(cfg["T"], cfg["n_steps"])


# ---------------------------------------------------------------------------
# commands; each returns (results dict, passed)

def _maybe_dump_trajectory(cfg, model, out_dir):
    idx = cfg["dump_trajectory"]
    if idx is None:
        return
    _require(isinstance(idx, int) and idx >= 0, "dump_trajectory must be a path index")
    traj = simulate_path(model, np.array(cfg["x0"]), _grid(cfg), est.rhs_seed_for(cfg["seed"]),
                         idx, stream=est.RHS_STREAM, noise_steps=cfg["noise_steps"],
                         bracket=cfg["bracket"])
    traj.to_csv(os.path.join(out_dir, "trajectories.csv"))


def _weight_sample(cfg, model, seed):
    return est.sample_weights(model, cfg["x0"], cfg["v"], _grid(cfg), cfg["n_paths"], seed,
                              est.RHS_STREAM, _options(cfg))


def _dump_weights(cfg, ws, out_dir):
    if cfg["dump_weights"]:
        write_weights_csv(os.path.join(out_dir, "weights.csv"), np.arange(ws.total.size),
                          ws.theta, ws.total)


def cmd_verify_ibp(cfg, model, out_dir):
    grid, opts = _grid(cfg), _options(cfg)
    seed = cfg["seed"]
    XT = est.sample_endpoints(model, cfg["x0"], grid, cfg["n_paths"], seed, est.LHS_STREAM, opts)
    ws = _weight_sample(cfg, model, est.rhs_seed_for(seed))
    _dump_weights(cfg, ws, out_dir)
    z_thr = cfg["overrides"].get("z_threshold", 4.0)
    reps = est.verify_ibp_many(model, cfg["x0"], cfg["v"], grid, cfg["f_names"], cfg["n_paths"],
                               seed, opts, z_threshold=z_thr, samples=(XT, ws))
    passed = all(r.passed for r in reps)
    headline = {}
    for r in reps:
        headline[f"z_{r.f_name}"] = r.z
        headline[f"abs_diff_{r.f_name}"] = r.abs_diff
        headline[f"joint_std_error_{r.f_name}"] = r.joint_std_error
    return {"tests": [r.to_dict() for r in reps], "passed": passed}, passed, headline


def cmd_moments(cfg, model, out_dir):
    p_list = cfg["p_list"]
    _require(isinstance(p_list, list) and p_list and all(isinstance(p, (int, float)) for p in p_list),
             "p_list must be a non-empty list of numbers")
    _require(all(p >= 2 for p in p_list), "moment orders in p_list must be >= 2")
    rep = est.check_moment_bounds(model, cfg["x0"], _grid(cfg), p_list, cfg["n_paths"],
                                  cfg["seed"], _options(cfg))
    headline = {}
    for row in rep.rows():
        headline[f"sup_mean_norm_J_p{row['p']:g}"] = row["sup_mean_norm_J"]
        headline[f"sup_mean_norm_Jinv_p{row['p']:g}"] = row["sup_mean_norm_Jinv"]
    return rep.to_dict(), rep.passed, headline


def cmd_weight_moments(cfg, model, out_dir):
    q = cfg["q"]
    _require(isinstance(q, (int, float)) and q >= 1, "q must be >= 1")
    ws = _weight_sample(cfg, model, cfg["seed"])
    _dump_weights(cfg, ws, out_dir)
    rep = est.check_weight_moment(model, cfg["x0"], cfg["v"], _grid(cfg), cfg["n_paths"],
                                  cfg["seed"], q, _options(cfg), C_q=cfg["overrides"].get("C_q"),
                                  sample=ws)
    headline = {"mean_abs_M": rep.mean_abs.mean, "Lq_norm_M": rep.Lq_norm}
    return rep.to_dict(), rep.passed, headline


def cmd_density(cfg, model, out_dir):
    d = model.d
    _require(d <= 3, "density estimation is limited to d <= 3")
    _require(cfg["n_paths"] >= 1000, "density estimation needs n_paths >= 1000")
    pts = cfg["eval_points"]
    if pts is None:
        pts = [[float(y)] + [0.0] * (d - 1) for y in (-2, -1, 0, 1, 2)]
    try:
        pts = np.asarray(pts, dtype=float).reshape(-1, d)
    except ValueError as exc:
        raise ConfigError(f"eval_points must be points of dimension {d}") from exc
    ws = _weight_sample(cfg, model, cfg["seed"])
    _dump_weights(cfg, ws, out_dir)
    rep = est.density_log_gradient(model, cfg["x0"], cfg["v"], _grid(cfg), cfg["n_paths"],
                                   cfg["seed"], pts, cfg["overrides"].get("bandwidth"),
                                   _options(cfg), sample=ws)
    headline = {"integrated": rep.integrated}
    for p, e in zip(rep.eval_points, rep.est_grad_log_p):
        headline["est_at_" + "_".join(f"{z:g}" for z in p)] = float(e)
    return rep.to_dict(), rep.passed, headline


def _solver_check_levels(cfg):
    lc = cfg["lemma31"]
    if "levels" in lc:
        return lc["levels"]
    n = cfg["n_steps"]
    _require(n % 4 == 0, "n_steps must be divisible by 4 for the default lemma31 levels")
    return [n // 4, n // 2, n]


def cmd_solver_check(cfg, model, out_dir):
    lc = cfg["lemma31"]
    _require(isinstance(lc, dict), "lemma31 must be an object")
    bad = sorted(set(lc) - {"n_systems", "dims", "seeds", "levels", "scale", "coeff_seed"})
    _require(not bad, f"unknown lemma31 keys: {bad}")
    levels = _solver_check_levels(cfg)
    seeds = lc.get("seeds", [cfg["seed"] + k for k in range(4)])
    try:
        rep = est.integrating_factor_study(lc.get("n_systems", 20), tuple(lc.get("dims", (1, 2))),
                                tuple(seeds), tuple(levels), cfg["T"], lc.get("coeff_seed", 2024),
                                cfg["bracket"], lc.get("scale", 0.5))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"lemma31: {exc}") from exc
    headline = {f"C_mean_p{s['p']}": s["C_mean"] for s in rep.summary()}
    return rep.to_dict(), rep.passed, headline


def cmd_perturb(cfg, model, out_dir):
    eps = cfg["eps_list"]
    _require(isinstance(eps, list) and eps and all(isinstance(e, (int, float)) and e > 0 for e in eps),
             "eps_list must be a non-empty list of positive numbers")
    _require(all(eps[i + 1] < eps[i] for i in range(len(eps) - 1)), "eps_list must be decreasing")
    rep = est.perturbation_check(model, cfg["x0"], cfg["v"], _grid(cfg), cfg["seed"], eps,
                                 cfg["path_index"], cfg["perturb_envelope"], cfg["bracket"])
    headline = {f"defect_eps_{e:g}": dfc for e, dfc in zip(rep.eps, rep.defects)}
    if len(rep.eps) == 1:
        headline = {"defect": rep.defects[0]}
    return rep.to_dict(), rep.passed, headline


def cmd_validate(cfg, model, out_dir):
    vc = cfg["validate"]
    _require(isinstance(vc, dict), "validate must be an object")
    bad = sorted(set(vc) - {"sample_count", "region_radius", "T_max"})
    _require(not bad, f"unknown validate keys: {bad}")
    count = vc.get("sample_count", cfg["n_paths"])
    _require(isinstance(count, int) and count >= 1, "sample_count must be >= 1")
    rep = validate_assumptions(model, count, float(vc.get("region_radius", 3.0)), cfg["seed"],
                               T_max=float(vc.get("T_max", cfg["T"])))
    return rep.to_dict(), rep.passed, {"n_violations": rep.n_violations}


HANDLERS = {
    "verify-ibp": cmd_verify_ibp,
    "moments": cmd_moments,
    "weight-moments": cmd_weight_moments,
    "density": cmd_density,
    "lemma31-check": cmd_solver_check,
    "perturb-check": cmd_perturb,
    "validate-model": cmd_validate,
}


# ---------------------------------------------------------------------------
# output

def _clean(obj):
    """Recursively convert to JSON-safe values; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def version_stamp():
    return {"package": __version__, "backend": kernels.NAME, "numpy": np.__version__,
            "python": platform.python_version()}


def write_report(out_dir, report):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(_clean(report), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")
    return path


def _fmt(x):
    if isinstance(x, bool) or x is None:
        return str(x)
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_sweep_csv(out_dir, param, rows):
    keys = []
    for r in rows:
        for k in r["headline"]:
            if k not in keys:
                keys.append(k)
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "passed", *keys])
        for r in rows:
            w.writerow([_fmt(r["value"]), _fmt(r["passed"])]
                       + [_fmt(r["headline"].get(k, "")) for k in keys])


def _error(kind, message, code, **extra):
    payload = {"error": {"type": kind, "message": message, **extra}}
    sys.stderr.write(json.dumps(_clean(payload), sort_keys=True) + "\n")
    return code


# ---------------------------------------------------------------------------
# entry points

def _run_one(command, cfg, model, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    _maybe_dump_trajectory(cfg, model, out_dir)
    return HANDLERS[command](cfg, model, out_dir)


def _sweep_value(param, raw):
    if param in ("n_steps", "n_paths"):
        try:
            val = float(raw)
        except ValueError:
            raise ConfigError(f"{param} values must be integers, got {raw!r}") from None
        _require(val.is_integer() and val >= 1, f"{param} values must be positive integers")
        return int(val)
    try:
        val = float(raw)
    except ValueError:
        raise ConfigError(f"epsilon values must be numbers, got {raw!r}") from None
    _require(val > 0, "epsilon values must be positive")
    return val


def run(command, config_path, flags, sweep=None):
    """Execute one command (or a sweep of it); returns the process exit code."""
    t0 = time.perf_counter()
    try:
        raw = load_config(config_path)
        cfg, model = resolve_config(raw, flags)
        out_dir = cfg["output_dir"]
        if sweep is None:
            results, passed, headline = _run_one(command, cfg, model, out_dir)
            report = {"command": command, "config": cfg, "results": results,
                      "headline": headline, "passed": passed}
        else:
            param, values = sweep
            _require(param in SWEEP_PARAMS, f"sweep param must be one of {SWEEP_PARAMS}")
            _require(values, "sweep needs at least one value")
            _require(param != "epsilon" or command == "perturb-check",
                     "epsilon sweeps only apply to perturb-check")
            values = [_sweep_value(param, v) for v in values]
            rows = []
            for val in values:
                sub = copy.deepcopy(cfg)
                if param == "epsilon":
                    sub["eps_list"] = [val]
                else:
                    sub[param] = val
                    if sub["noise_steps"] is not None and param == "n_steps":
                        _require(sub["noise_steps"] % val == 0,
                                 "noise_steps must be a multiple of every swept n_steps")
                sub, sub_model = resolve_config({k: v for k, v in sub.items()}, None)
                results, ok, headline = _run_one(command, sub, sub_model, out_dir)
                rows.append({"value": val, "passed": ok, "headline": headline, "results": results})
            passed = all(r["passed"] for r in rows)
            extra = {}
            if param == "epsilon":
                defects = [r["headline"]["defect"] for r in rows]
                order = np.argsort(values)[::-1]
                mono = all(defects[order[i + 1]] <= defects[order[i]] + 1e-12
                           for i in range(len(order) - 1))
                extra["defects_monotone_in_epsilon"] = mono
                passed = passed and mono
            write_sweep_csv(out_dir, param, rows)
            report = {"command": "sweep", "subcommand": command, "param": param,
                      "values": values, "config": cfg, "runs": rows, "passed": passed, **extra}
        report["wall_time"] = time.perf_counter() - t0
        report["version"] = version_stamp()
        write_report(out_dir, report)
    except ConfigError as exc:
        return _error("config", str(exc), EXIT_CONFIG)
    except (PathAbort, WeightAbort) as exc:
        return _error("numerical", str(exc), EXIT_NUMERIC,
                      step=getattr(exc, "step", None), term=getattr(exc, "term", None),
                      path_index=getattr(exc, "path_index", None))
    except (ModelEvaluationError, FloatingPointError) as exc:
        return _error("numerical", str(exc), EXIT_NUMERIC)
    except ValueError as exc:
        # argument checks inside the library surface as ValueError
        return _error("config", str(exc), EXIT_CONFIG)
    if not passed:
        return _error("check_failed", f"{command}: at least one check failed", EXIT_FAILED)
    return EXIT_OK


def _common(p):
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int, dest="n_paths")
    p.add_argument("--steps", type=int, dest="n_steps")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", dest="output_dir")


def build_parser():
    parser = argparse.ArgumentParser(prog="malliavin-mc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _common(sub.add_parser(name))
    sw = sub.add_parser("sweep", help="run a command over a list of parameter values")
    sw.add_argument("subcommand", choices=COMMANDS)
    sw.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sw.add_argument("--values", nargs="*", default=[])
    _common(sw)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config-error code
        return int(exc.code or 0)
    flags = {k: getattr(args, k) for k in ("seed", "n_paths", "n_steps", "threads", "output_dir")}
    if args.command == "sweep":
        return run(args.subcommand, args.config, flags, (args.param, args.values))
    return run(args.command, args.config, flags)


if __name__ == "__main__":
    sys.exit(main())
