"""Monte Carlo experiment runner.

Each replicate draws one trial (shared by all scenarios, so scenario
contrasts use common random numbers) and applies every requested estimator
under every scenario. Scenario ``b`` feeds the uptake model transformed
covariates, ``c`` does so for the outcome model and ``d`` for both.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..data import IndividualData, WeightSpec
from ..errors import ClusterPSError, ConfigError
from ..estimators import EFFECT_VARIANCES, eif_estimates, point_estimates
from ..inference import BootstrapConfig, cluster_bootstrap, percentile_ci, wald_ci
from ..nuisance.fit import NuisanceSpec, cross_fit, crossfit_table, fit_nuisance, full_table, make_folds
from ..sensitivity import SensitivityFunctions, bc_estimates
from .dgp import DGPConfig, draw_trial, to_individual
from .oracle import TruthOracleResult

SCENARIOS = {"a": (False, False), "b": (True, False), "c": (False, True), "d": (True, True)}
ESTIMATORS = ("mo", "dr", "np", "bc_mo", "bc_np")
DEFAULT_ESTIMANDS = ("NAE_co", "ICE_co", "PCE_co", "NAE_nt", "NAE_at")


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DGPConfig = DGPConfig()
    scenarios: tuple[str, ...] = ("a", "b", "c", "d")
    estimators: tuple[str, ...] = ("mo", "dr", "np")
    estimands: tuple[str, ...] = DEFAULT_ESTIMANDS
    reps: int = 500
    seed: int = 0
    L: int = 5
    bootstrap_B: int = 500
    level: float = 0.95
    parametric: NuisanceSpec = NuisanceSpec()
    flexible: NuisanceSpec = NuisanceSpec(learner="ensemble")
    weight: WeightSpec = WeightSpec()
    sensitivity: SensitivityFunctions = SensitivityFunctions()
    # learner used by bc_np; "flexible" or "parametric"
    bc_learner: str = "flexible"
    effect_variance: str = "cellwise"

    def __post_init__(self):
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"unknown scenario {s!r}")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}")
        if self.reps < 1:
            raise ConfigError("reps must be positive")
        if self.bc_learner not in ("flexible", "parametric"):
            raise ConfigError("bc_learner must be flexible or parametric")
        if self.effect_variance not in EFFECT_VARIANCES:
            raise ConfigError(f"effect_variance must be one of {EFFECT_VARIANCES}")
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "estimands", tuple(self.estimands))


def scenario_spec(spec: NuisanceSpec, scenario: str) -> NuisanceSpec:
    mis_p, mis_mu = SCENARIOS[scenario]
    return spec.with_(
        p_transform="misspecified" if mis_p else "identity",
        mu_transform="misspecified" if mis_mu else "identity",
    )


def _strata(estimands) -> list[str]:
    out = []
    for e in estimands:
        g = e.split("_")[1]
        if g not in out:
            out.append(g)
    return out


@dataclass(frozen=True)
class Row:
    rep: int
    scenario: str
    estimator: str
    estimand: str
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    error: str = ""


def _nan_rows(rep, scen, est, estimands, code):
    return [Row(rep, scen, est, e, math.nan, math.nan, math.nan, math.nan, code) for e in estimands]


def run_replicate(cfg: ExperimentConfig, rep: int) -> list[Row]:
    """All scenarios and estimators for replicate ``rep`` (seeded by ``(seed, rep)``)."""
    ss = np.random.SeedSequence([cfg.seed, rep])
    s_data, s_fold, s_fit, s_boot = ss.spawn(4)
    draw = draw_trial(cfg.dgp, np.random.default_rng(s_data))
    data = to_individual(draw, cfg.weight)
    fit_seed = int(s_fit.generate_state(1)[0])
    fold_seed = int(s_fold.generate_state(1)[0])
    boot_seed = int(s_boot.generate_state(1)[0])
    strata = _strata(cfg.estimands)
    rows: list[Row] = []
    for scen in cfg.scenarios:
        rows += _parametric_rows(cfg, rep, scen, data, strata, fit_seed, boot_seed)
        rows += _flexible_rows(cfg, rep, scen, data, strata, fit_seed, fold_seed)
    return rows


def _parametric_rows(cfg, rep, scen, data: IndividualData, strata, fit_seed, boot_seed) -> list[Row]:
    wanted = [e for e in ("mo", "dr", "bc_mo") if e in cfg.estimators]
    if not wanted:
        return []
    spec = scenario_spec(cfg.parametric, scen)
    s = cfg.sensitivity

    def estimate(d: IndividualData) -> dict:
        tab = full_table(d, fit_nuisance(d, spec, fit_seed))
        out = {}
        if "mo" in wanted:
            out.update({("mo", k): v for k, v in point_estimates("mo", d, tab, strata).items()})
        if "dr" in wanted:
            out.update({("dr", k): v for k, v in point_estimates("dr", d, tab, strata).items()})
        if "bc_mo" in wanted:
            out.update({("bc_mo", k): v for k, (v, _) in bc_estimates(d, tab, s, strata, "mo").items()})
        return out

    try:
        point = estimate(data)
    except ClusterPSError as exc:
        return [r for e in wanted for r in _nan_rows(rep, scen, e, cfg.estimands, exc.code)]
    boot = None
    boot_err = ""
    if cfg.bootstrap_B > 0:
        try:
            boot = cluster_bootstrap(estimate, data, BootstrapConfig(cfg.bootstrap_B, cfg.level, boot_seed))
        except ClusterPSError as exc:
            boot_err = exc.code
    rows = []
    for est in wanted:
        for e in cfg.estimands:
            v = point[(est, e)]
            se = lo = hi = math.nan
            if boot is not None:
                dist = boot[(est, e)]
                se = float(np.std(dist, ddof=1))
                try:
                    lo, hi = percentile_ci(dist, cfg.level)
                except ClusterPSError:
                    pass
            rows.append(Row(rep, scen, est, e, v, se, lo, hi, boot_err))
    return rows


def _flexible_rows(cfg, rep, scen, data: IndividualData, strata, fit_seed, fold_seed) -> list[Row]:
    wanted = [e for e in ("np", "bc_np") if e in cfg.estimators]
    if not wanted:
        return []
    rows = []
    tables = {}
    for est in wanted:
        base = cfg.flexible if est == "np" or cfg.bc_learner == "flexible" else cfg.parametric
        spec = scenario_spec(base, scen)
        try:
            if spec not in tables:
                folds = make_folds(data, cfg.L, fold_seed)
                tables[spec] = crossfit_table(data, cross_fit(data, spec, folds, fit_seed), folds)
            tab = tables[spec]
            if est == "np":
                res = eif_estimates(data, tab, strata, effect_variance=cfg.effect_variance)
            else:
                res = bc_estimates(data, tab, cfg.sensitivity, strata, "np", cfg.effect_variance)
        except ClusterPSError as exc:
            rows += _nan_rows(rep, scen, est, cfg.estimands, exc.code)
            continue
        for e in cfg.estimands:
            v, se = res[e]
            lo, hi = wald_ci(v, se, cfg.level)
            rows.append(Row(rep, scen, est, e, v, se, lo, hi))
    return rows


def _run_chunk(args):
    cfg, reps = args
    return [run_replicate(cfg, r) for r in reps]


def run_replicates(cfg: ExperimentConfig, threads: int = 1, reps=None, progress=None) -> list[Row]:
    """Rows for replicates ``reps`` (default all), ordered by replicate index."""
    reps = list(range(cfg.reps)) if reps is None else list(reps)
    out: list[Row] = []
    if threads <= 1:
        for r in reps:
            out += run_replicate(cfg, r)
            if progress:
                progress(r)
        return out
    chunks = [reps[i:i + 4] for i in range(0, len(reps), 4)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        for chunk, res in zip(chunks, pool.map(_run_chunk, [(cfg, c) for c in chunks])):
            for r, rows in zip(chunk, res):
                out += rows
                if progress:
                    progress(r)
    return out


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    estimator: str
    estimand: str
    n: int
    failures: int
    truth: float
    mean: float
    bias: float
    sd: float
    mc_se: float
    mean_se: float
    coverage: float

    def passes_bias(self, frac: float = 0.25) -> bool:
        return abs(self.bias) <= frac * self.sd


def summarize(rows: list[Row], truth: TruthOracleResult) -> list[SummaryRow]:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.scenario, r.estimator, r.estimand), []).append(r)
    out = []
    for (scen, est, e), rs in groups.items():
        vals = np.array([r.estimate for r in rs])
        ok = np.isfinite(vals)
        v = vals[ok]
        t = truth.value(e)
        n = int(ok.sum())
        sd = float(np.std(v, ddof=1)) if n > 1 else math.nan
        ses = np.array([r.se for r in rs])[ok]
        lo = np.array([r.ci_lo for r in rs])[ok]
        hi = np.array([r.ci_hi for r in rs])[ok]
        has_ci = np.isfinite(lo) & np.isfinite(hi)
        cover = float(np.mean((lo[has_ci] <= t) & (t <= hi[has_ci]))) if has_ci.any() else math.nan
        mean = float(v.mean()) if n else math.nan
        out.append(SummaryRow(
            scen, est, e, n, len(rs) - n, t, mean, mean - t, sd,
            sd / math.sqrt(n) if n > 1 else math.nan,
            float(np.nanmean(ses)) if np.isfinite(ses).any() else math.nan,
            cover,
        ))
    return out


ROW_FIELDS = ("rep", "scenario", "estimator", "estimand", "estimate", "se", "ci_lo", "ci_hi", "error")
SUMMARY_FIELDS = ("scenario", "estimator", "estimand", "n", "failures", "truth", "mean", "bias", "sd",
                  "mc_se", "mean_se", "coverage")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(getattr(r, f)) for f in fields])
    return buf.getvalue()


def read_rows(text: str) -> list[Row]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(Row(int(rec["rep"]), rec["scenario"], rec["estimator"], rec["estimand"],
                       float(rec["estimate"]), float(rec["se"]), float(rec["ci_lo"]), float(rec["ci_hi"]),
                       rec["error"]))
    return out
