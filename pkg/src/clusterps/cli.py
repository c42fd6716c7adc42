"""Command-line front end: ``clusterps analyze | simulate | sensitivity | truth | replay``.

Options resolve in three layers: built-in defaults, then an INI file given
with ``--config`` (keys in ``[common]`` and in the section named after the
command), then command-line flags. Every run writes a ``manifest.json`` with
the resolved options and output digests; ``clusterps replay`` reruns it.
Exit codes: 0 success, 2 invalid data or configuration, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import CsvSchema, FeatureSummary, WeightSpec, flatten, load_csv
from .errors import ClusterPSError, ConfigError, EstimationError, TooFewClusters
from .estimators import (
    EstimateReport,
    default_strata,
    eif_components,
    eif_estimates,
    itt_estimate,
    point_estimates,
    theta_name,
)
from .inference import BootstrapConfig, cluster_bootstrap, percentile_ci, wald_ci
from .nuisance.ensemble import ForestParams
from .nuisance.fit import NuisanceSpec, cross_fit, crossfit_table, fit_nuisance, full_table, make_folds
from .principal_score import scheme, score_diagnostics, stratum_proportion
from .sensitivity import PARAMS, SensitivityFunctions, grid_scan, parse_estimand
from .simulation.dgp import DGPConfig
from .simulation.experiment import (
    DEFAULT_ESTIMANDS,
    ROW_FIELDS,
    SUMMARY_FIELDS,
    ExperimentConfig,
    rows_csv,
    run_replicates,
    summarize,
)
from .simulation.oracle import truth_oracle

COMMANDS = ("analyze", "simulate", "sensitivity", "truth")


# --- option table --------------------------------------------------------------

@dataclass(frozen=True)
class Opt:
    kind: str  # str | int | float | list
    default: object
    commands: tuple[str, ...]
    help: str = ""


_DATA = ("analyze", "sensitivity")
_NUIS = ("analyze", "sensitivity", "simulate")

OPTIONS: dict[str, Opt] = {
    "seed": Opt("int", 0, COMMANDS, "master seed"),
    # data
    "data": Opt("str", None, _DATA, "trial CSV"),
    "pi": Opt("float", 0.5, _DATA, "assignment probability"),
    "col_cluster": Opt("str", "cluster_id", _DATA, "cluster id column"),
    "col_a": Opt("str", "a", _DATA, "assignment column"),
    "col_d": Opt("str", "d", _DATA, "uptake column"),
    "col_y": Opt("str", "y", _DATA, "outcome column"),
    "col_x": Opt("list", None, _DATA, "individual covariate columns (default: x_1, x_2, ...)"),
    "col_v": Opt("list", None, _DATA, "cluster covariate columns (default: v_1, v_2, ...)"),
    "features": Opt("str", "own", _DATA, "own | own_plus_peer_mean"),
    "weight": Opt("str", "cluster", _DATA + ("simulate", "truth"), "cluster | individual | custom:<expr>"),
    "mode": Opt("str", "standard", _DATA, "monotonicity: standard | strong"),
    # nuisance
    "learner": Opt("str", "ensemble", _NUIS, "learner for cross-fitted (np) nuisances: glm | ensemble"),
    "p_formula": Opt("list", list(NuisanceSpec().p_formula), _DATA, "uptake model terms"),
    "mu_formula": Opt("list", list(NuisanceSpec().mu_formula), _DATA, "outcome model terms"),
    "mu_strategy": Opt("str", "arm", _DATA, "arm | cell"),
    "clip": Opt("float", 1e-3, _DATA, "uptake probability clipping"),
    "L": Opt("int", 5, _NUIS, "cross-fitting folds"),
    "stack_folds": Opt("int", 5, _NUIS, "ensemble stacking folds"),
    "n_trees": Opt("int", 200, _NUIS, "forest size"),
    "max_depth": Opt("int", 6, _NUIS, "forest depth"),
    # estimation and inference
    "estimator": Opt("list", ["mo", "dr", "np"], ("analyze", "simulate"), "estimators"),
    "estimand": Opt("list", None, ("analyze", "sensitivity", "simulate"), "estimands, e.g. NAE_co"),
    "B": Opt("int", 1000, ("analyze", "simulate"), "bootstrap replicates (0 disables)"),
    "level": Opt("float", 0.95, ("analyze", "sensitivity", "simulate"), "confidence level"),
    "effect_variance": Opt("str", "cellwise", ("analyze", "sensitivity", "simulate"),
                           "np effect variance: cellwise | delta"),
    # sensitivity
    "alpha": Opt("list", ["0.5", "2"], ("sensitivity",), "alpha range lo,hi"),
    "beta": Opt("list", ["0.5", "2"], ("sensitivity",), "beta range lo,hi"),
    "gamma": Opt("list", ["0.5", "2"], ("sensitivity",), "gamma range lo,hi"),
    "step": Opt("float", 0.25, ("sensitivity",), "grid step"),
    "method": Opt("str", "np", ("sensitivity",), "np | mo"),
    # simulation
    "scenario": Opt("list", ["a", "b", "c", "d"], ("simulate",), "scenarios"),
    "reps": Opt("int", 500, ("simulate",), "Monte Carlo replicates"),
    "K": Opt("int", 100, ("simulate", "truth"), "clusters per trial"),
    "copula_rho": Opt("float", 0.1, ("simulate", "truth"), "within-cluster latent correlation"),
    "multiplier": Opt("list", [], ("simulate", "truth"), "outcome-mean multipliers g,a,d=value"),
    "sens_alpha": Opt("float", 1.0, ("simulate",), "alpha used by bias-corrected estimators"),
    "sens_beta": Opt("float", 1.0, ("simulate",), "beta used by bias-corrected estimators"),
    "sens_gamma": Opt("float", 1.0, ("simulate",), "gamma used by bias-corrected estimators"),
    "population": Opt("int", 50_000, ("simulate", "truth"), "oracle population clusters"),
}


def _convert(kind: str, value, name: str):
    if value is None:
        return None
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "list":
            if isinstance(value, str):
                value = [value]
            out = []
            for v in value:
                out += [s.strip() for s in str(v).split(",") if s.strip()] if "=" not in str(v) else \
                    [s.strip() for s in str(v).split(";") if s.strip()]
            return out
        return str(value)
    except ValueError:
        raise ConfigError(f"option {name}: cannot parse {value!r} as {kind}") from None


def _read_ini(path: str, command: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    out = {}
    for section in ("common", command):
        if cp.has_section(section):
            for key, val in cp.items(section):
                name = key.replace("-", "_")
                if name not in OPTIONS:
                    raise ConfigError(f"unknown option {key!r} in [{section}] of {path}")
                if command in OPTIONS[name].commands:
                    out[name] = val
    return out


def resolve(command: str, ini_path: str | None, flags: dict) -> dict:
    """Defaults, then INI values, then flags (flags win)."""
    cfg = {k: o.default for k, o in OPTIONS.items() if command in o.commands}
    layers = [_read_ini(ini_path, command) if ini_path else {}, {k: v for k, v in flags.items() if v is not None}]
    for layer in layers:
        for k, v in layer.items():
            if k in cfg:
                cfg[k] = _convert(OPTIONS[k].kind, v, k)
    return cfg


# --- output plumbing -------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: non-finite floats become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _json(obj) -> bytes:
    return (json.dumps(_clean(obj), indent=2) + "\n").encode()


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue().encode()


def write_outputs(out_dir: Path, files: dict[str, bytes], command: str, cfg: dict) -> None:
    """Write ``files`` plus the manifest; each file lands atomically via rename."""
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        "seed": cfg.get("seed"),
        "inputs": _input_digests(cfg),
        "outputs": {name: hashlib.sha256(data).hexdigest() for name, data in files.items()},
    }
    files = {**files, "manifest.json": _json(manifest)}
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        tmp = out_dir / f".{name}.tmp"
        tmp.write_bytes(data)
        os.replace(tmp, out_dir / name)


def _input_digests(cfg: dict) -> dict:
    path = cfg.get("data")
    if not path:
        return {}
    return {str(path): hashlib.sha256(Path(path).read_bytes()).hexdigest()}


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# --- shared builders ------------------------------------------------------------------

def _weight(cfg) -> WeightSpec:
    return WeightSpec.parse(cfg["weight"])


def _forest(cfg) -> ForestParams:
    return ForestParams(n_trees=cfg["n_trees"], max_depth=cfg["max_depth"])


def _specs(cfg) -> tuple[NuisanceSpec, NuisanceSpec]:
    base = NuisanceSpec(p_formula=tuple(cfg["p_formula"]), mu_formula=tuple(cfg["mu_formula"]),
                        mu_strategy=cfg["mu_strategy"], clip=cfg["clip"], stack_folds=cfg["stack_folds"],
                        forest=_forest(cfg))
    return base, base.with_(learner=cfg["learner"])


def _load(cfg):
    if not cfg.get("data"):
        raise ConfigError("--data is required")
    schema = CsvSchema(cfg["col_cluster"], cfg["col_a"], cfg["col_d"], cfg["col_y"],
                       tuple(cfg["col_x"]) if cfg["col_x"] is not None else None,
                       tuple(cfg["col_v"]) if cfg["col_v"] is not None else None)
    ds = load_csv(cfg["data"], schema, cfg["pi"])
    if cfg["mode"] not in ("standard", "strong"):
        raise ConfigError(f"mode must be standard or strong, got {cfg['mode']!r}")
    data = flatten(ds, FeatureSummary(cfg["features"]), _weight(cfg))
    return ds, data


def _check_estimands(names, mode) -> list[str]:
    out = []
    for e in names:
        if e == "ITT":
            out.append(e)
            continue
        if e.startswith("theta_"):
            g = e[len("theta_"):].split("(")[0]
            scheme(g, mode)
            out.append(e)
            continue
        g, _ = parse_estimand(e)
        scheme(g, mode)
        out.append(e)
    return out


def _estimand_strata(estimands) -> list[str]:
    out = []
    for e in estimands:
        if e == "ITT":
            continue
        g = e[len("theta_"):].split("(")[0] if e.startswith("theta_") else e.split("_")[1]
        if g not in out:
            out.append(g)
    return out


def _default_estimands(mode) -> list[str]:
    return [f"{eff}_{g}" for g in default_strata(mode) for eff in ("PCE", "ICE", "NAE")] + ["ITT"]


# --- analyze ---------------------------------------------------------------------------

def cmd_analyze(cfg: dict, threads: int) -> dict[str, bytes]:
    mode = cfg["mode"]
    estimators = cfg["estimator"]
    for e in estimators:
        if e not in ("mo", "dr", "np"):
            raise ConfigError(f"unknown estimator {e!r}; expected mo, dr or np")
    estimands = _check_estimands(cfg["estimand"] or _default_estimands(mode), mode)
    strata = _estimand_strata(estimands)
    ds, data = _load(cfg)
    parametric, flexible = _specs(cfg)
    fit_seed, fold_seed, boot_seed = _seeds(cfg["seed"], 3)
    if "np" in estimators and cfg["L"] > ds.K:
        raise TooFewClusters(f"cannot split {ds.K} clusters into {cfg['L']} folds")

    reports: list[EstimateReport] = []
    level = cfg["level"]
    full = full_table(data, fit_nuisance(data, parametric, fit_seed, mode))
    diagnostics = {
        "n_clusters": ds.K,
        "n_individuals": data.n,
        "mode": mode,
        "weight": _weight(cfg).describe(),
        "feature_names": list(data.names),
        "stratum_proportions": {g: stratum_proportion(g, data, full.p11, full.p01) for g in default_strata(mode)},
        "principal_scores": score_diagnostics(full.p11, full.p01, mode),
        "clipped_p": full.clip_count,
        "nuisance": full.diagnostics["nuisance"],
    }

    boot_methods = [m for m in ("mo", "dr") if m in estimators]
    want_itt = "ITT" in estimands

    def estimate(d):
        out = {}
        if boot_methods:
            tab = full_table(d, fit_nuisance(d, parametric, fit_seed, mode))
            for m in boot_methods:
                out.update({(m, k): v for k, v in point_estimates(m, d, tab, strata).items()})
        if want_itt:
            out[("itt", "ITT")] = itt_estimate(d)
        return out

    point = estimate(data)
    boot = None
    boot_info = None
    if cfg["B"] > 0 and point:
        boot = cluster_bootstrap(estimate, data, BootstrapConfig(cfg["B"], level, boot_seed), threads=threads)
        boot_info = {"B": boot.B, "failed": boot.n_failed, "failures": boot.failures, "seed": boot_seed}

    def boot_report(method, name):
        v = point[(method, name)]
        se = ci = ci_method = None
        if boot is not None and boot.n_ok >= 2:
            dist = boot[(method, name)]
            se = float(np.std(dist, ddof=1))
            if boot.n_ok >= 100:
                lo, hi = percentile_ci(dist, level)
                ci, ci_method = (lo, hi, level), "bootstrap_percentile"
        return EstimateReport(name, method, v, se, ci, ci_method, {"bootstrap": boot_info})

    for m in boot_methods:
        for e in estimands:
            if e != "ITT":
                reports.append(boot_report(m, e))
    if want_itt:
        reports.append(boot_report("itt", "ITT"))

    files = {}
    if "np" in estimators:
        folds = make_folds(data, cfg["L"], fold_seed)
        cf = crossfit_table(data, cross_fit(data, flexible, folds, fit_seed, mode), folds)
        est = eif_estimates(data, cf, strata, effect_variance=cfg["effect_variance"])
        fold_info = {"L": folds.L, "seed": fold_seed, "sizes": folds.sizes().tolist(), "clipped_p": cf.clip_count}
        for e in estimands:
            if e == "ITT":
                continue
            v, se = est[e]
            lo, hi = wald_ci(v, se, level)
            reports.append(EstimateReport(e, "np", v, se, (lo, hi, level), "wald", {"folds": fold_info}))
        diagnostics["crossfit"] = {**fold_info, "nuisance": cf.diagnostics["nuisance"]}
        files["eif_clusters.csv"] = _eif_audit(ds, data, cf, strata)

    files["analysis.json"] = _json({
        "estimates": [r.as_dict() for r in reports],
        "diagnostics": diagnostics,
    })
    return files


def _eif_audit(ds, data, table, strata) -> bytes:
    """Per-cluster contributions (W/N) sum_j (psi1 - psi2 * theta) for every cell."""
    cols, names = [], []
    for g in strata:
        for c in scheme(g, table.mode).valid_cells:
            comp = eif_components(g, c, data, table)
            cols.append(data.cluster_sum(comp.psi1 - comp.psi2 * comp.theta))
            names.append(theta_name(g, c))
    rows = [[cl.id] + [float(col[i]) for col in cols] for i, cl in enumerate(ds.clusters)]
    return _csv(["cluster_id"] + names, rows)


# --- sensitivity -------------------------------------------------------------------------

def _range(cfg, name):
    vals = cfg[name]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise ConfigError(f"{name} range must be lo,hi, got {vals}")
    return float(vals[0]), float(vals[1])


def cmd_sensitivity(cfg: dict, threads: int) -> dict[str, bytes]:
    mode = cfg["mode"]
    estimands = cfg["estimand"] or (["NAE_co", "ICE_co", "PCE_co", "NAE_nt"])
    for e in estimands:
        g, _ = parse_estimand(e)
        scheme(g, mode)
    if cfg["method"] not in ("np", "mo"):
        raise ConfigError(f"method must be np or mo, got {cfg['method']!r}")
    ranges = {p: _range(cfg, p) for p in PARAMS}
    ds, data = _load(cfg)
    parametric, flexible = _specs(cfg)
    fit_seed, fold_seed, _ = _seeds(cfg["seed"], 3)
    if cfg["method"] == "np":
        folds = make_folds(data, cfg["L"], fold_seed)
        table = crossfit_table(data, cross_fit(data, flexible, folds, fit_seed, mode), folds)
    else:
        table = full_table(data, fit_nuisance(data, parametric, fit_seed, mode))
    rows = grid_scan(estimands, data, table, ranges, cfg["step"], cfg["level"], cfg["method"],
                     cfg["effect_variance"])
    header = ["alpha", "beta", "gamma", "estimand", "estimate", "se", "ci_lo", "ci_hi"]
    return {"grid.csv": _csv(header, [[r.alpha, r.beta, r.gamma, r.estimand, r.estimate, r.se, r.ci_lo, r.ci_hi]
                                      for r in rows])}


# --- simulate / truth ----------------------------------------------------------------------

def _multipliers(cfg) -> dict:
    out = {}
    for item in cfg["multiplier"]:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"multiplier must look like nt,0,0=0.5, got {item!r}")
        out[key.strip()] = _convert("float", val, "multiplier")
    return out


def _dgp(cfg) -> DGPConfig:
    return DGPConfig(K=cfg["K"], copula_rho=cfg["copula_rho"], multipliers=_multipliers(cfg))


def cmd_simulate(cfg: dict, threads: int, log=None) -> dict[str, bytes]:
    dgp = _dgp(cfg)
    parametric = NuisanceSpec(stack_folds=cfg["stack_folds"], forest=_forest(cfg))
    exp = ExperimentConfig(
        dgp=dgp,
        scenarios=tuple(cfg["scenario"]),
        estimators=tuple(cfg["estimator"]),
        estimands=tuple(cfg["estimand"] or DEFAULT_ESTIMANDS),
        reps=cfg["reps"],
        seed=cfg["seed"],
        L=cfg["L"],
        bootstrap_B=cfg["B"],
        level=cfg["level"],
        parametric=parametric,
        flexible=parametric.with_(learner=cfg["learner"]),
        weight=_weight(cfg),
        sensitivity=SensitivityFunctions(cfg["sens_alpha"], cfg["sens_beta"], cfg["sens_gamma"]),
        effect_variance=cfg["effect_variance"],
    )
    for e in exp.estimands:
        g, _ = parse_estimand(e)
        scheme(g)
    truth = truth_oracle(dgp, cfg["population"], seed=cfg["seed"], weight=exp.weight)
    progress = None
    if log is not None:
        progress = lambda r: log(f"replicate {r + 1}/{exp.reps}")  # noqa: E731
    rows = run_replicates(exp, threads=threads, progress=progress)
    summary = summarize(rows, truth)
    return {
        "summary.csv": rows_csv(summary, SUMMARY_FIELDS).encode(),
        "replicates.csv": rows_csv(rows, ROW_FIELDS).encode(),
        "truth.json": _json(truth.as_dict()),
    }


def cmd_truth(cfg: dict, threads: int) -> dict[str, bytes]:
    truth = truth_oracle(_dgp(cfg), cfg["population"], seed=cfg["seed"], weight=_weight(cfg))
    return {"truth.json": _json(truth.as_dict())}


RUNNERS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "sensitivity": cmd_sensitivity, "truth": cmd_truth}


# --- argument parsing ----------------------------------------------------------------------

def _add_options(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", help="INI file with [common] and [%s] sections" % command)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None, help="worker count (default: all cores)")
    for name, opt in OPTIONS.items():
        if command not in opt.commands:
            continue
        flag = "--" + name.replace("_", "-")
        if opt.kind == "list":
            p.add_argument(flag, dest=name, action="append", default=None, help=opt.help)
        else:
            p.add_argument(flag, dest=name, default=None, help=opt.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "analyze": "estimate principal causal effects on a trial CSV",
        "simulate": "run a Monte Carlo campaign",
        "sensitivity": "bias-corrected estimates over a sensitivity grid",
        "truth": "evaluate estimand truths on a simulated super population",
    }
    for c in COMMANDS:
        _add_options(sub.add_parser(c, help=helps[c]), c)
    rp = sub.add_parser("replay", help="rerun a previous run from its manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    rp.add_argument("--threads", type=int, default=None)
    return parser


def _fail(exc: ClusterPSError) -> int:
    sys.stderr.write(json.dumps(exc.record()) + "\n")
    return 3 if isinstance(exc, EstimationError) else 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads or os.cpu_count() or 1

    def log(msg):
        sys.stderr.write(msg + "\n")

    try:
        if args.command == "replay":
            try:
                manifest = json.loads(Path(args.manifest).read_text())
                command, cfg = manifest["command"], manifest["config"]
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"unreadable manifest {args.manifest}: {exc}") from None
            if command not in RUNNERS:
                raise ConfigError(f"manifest names unknown command {command!r}")
            cfg = resolve(command, None, cfg)
        else:
            command = args.command
            flags = {k: getattr(args, k) for k in OPTIONS if hasattr(args, k)}
            cfg = resolve(command, args.config, flags)
        t0 = time.time()
        if command == "simulate":
            files = cmd_simulate(cfg, threads, log)
        else:
            files = RUNNERS[command](cfg, threads)
        write_outputs(Path(args.out), files, command, cfg)
        log(f"{command}: wrote {', '.join(sorted(files))} and manifest.json to {args.out} "
            f"in {time.time() - t0:.1f}s")
        return 0
    except ClusterPSError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
