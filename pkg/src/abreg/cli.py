"""Command-line front end.

A run is described by one JSON document::

    {"command": "simulate", "seed": 1,
     "scenario": {"kind": "linear", "design": "A", "p": 50, "n": 300, "reps": 200},
     "methods": ["GREG", "GREG-L", "AB", "ABH", "HT"],
     "mcmc": {"n_draws": 2000, "burn_in": 200},
     "output": {"dir": "out"}}

``estimate`` and ``posterior`` read survey data instead of a scenario::

    "dataset": {"path": "sample.csv", "response": "y", "weight": "w",
                "aux": ["x1", "x2"], "domain": null,
                "totals": {"population_csv": "pop.csv"}}

Every report embeds the validated config, so ``abreg --config report.json``
re-runs it exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.stats import norm

from . import __version__, bayes, glm, harness, regfit
from .errors import AbregError, ConfigError, DataError
from .survey import (AuxTotals, DesignSpec, Sample, greg_mean, ht_mean, ht_variance,
                     variance_e)

log = logging.getLogger("abreg")

FULL_REPS, FULL_DRAWS, FULL_BURN = 1000, 5000, 500


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioBlock(_Strict):
    kind: Literal["linear", "logistic"] = "linear"
    N: int = 10_000
    p_star: int = 50
    p: int = 50
    n: int = 300
    rho: float = 0.2
    design: Literal["A", "B"] = "A"
    reps: int = 200
    beta0: Optional[float] = None
    noise_sd: float = 2.0
    size_rate: Optional[float] = None
    cv_folds: int = 10
    n_lambda: int = 100
    workers: int = 1


class TotalsBlock(_Strict):
    xbar_csv: Optional[str] = None
    population_csv: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.xbar_csv is None) == (self.population_csv is None):
            raise ValueError("give exactly one of totals.xbar_csv or totals.population_csv")
        return self


class DatasetBlock(_Strict):
    path: str
    response: str
    weight: str
    aux: List[str] = Field(min_length=1)
    domain: Optional[str] = None
    model: Literal["linear", "logistic"] = "linear"
    totals: TotalsBlock
    population_size: Optional[int] = None
    pairwise: Literal["independence", "exact_srs"] = "independence"


class PriorBlock(_Strict):
    kind: Literal["flat", "laplace", "horseshoe"] = "flat"
    a: Optional[float] = None  # None with laplace: centred on the CV lasso penalty
    b: float = 1.0


class McmcBlock(_Strict):
    n_draws: int = 2000
    burn_in: int = 200
    thin: int = 1


class OutputBlock(_Strict):
    dir: str = "abreg_out"


class RunConfig(_Strict):
    command: Literal["simulate", "estimate", "posterior"]
    seed: int = 0
    scenario: Optional[ScenarioBlock] = None
    dataset: Optional[DatasetBlock] = None
    methods: Optional[List[str]] = None
    prior: PriorBlock = PriorBlock()
    mcmc: McmcBlock = McmcBlock()
    level: float = 0.95
    output: OutputBlock = OutputBlock()

    @model_validator(mode="after")
    def _blocks(self):
        if self.command == "simulate":
            if self.dataset is not None:
                raise ValueError("simulate takes a scenario block, not a dataset")
            if self.scenario is None:
                self.scenario = ScenarioBlock()
        else:
            if self.dataset is None:
                raise ValueError(f"{self.command} needs a dataset block")
            if self.scenario is not None:
                raise ValueError(f"{self.command} takes a dataset block, not a scenario")
            for f in (self.dataset.path, self.dataset.totals.xbar_csv,
                      self.dataset.totals.population_csv):
                if f is not None and not Path(f).is_file():
                    raise ValueError(f"file not found: {f}")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        return self


# --------------------------------------------------------------------------
# Data ingestion


class Dataset:
    """Parsed survey rows: response, weights (1/pi), auxiliaries, optional domain."""

    def __init__(self, y, weight, x, aux_names, domain=None, domain_labels=None):
        self.y = y
        self.weight = weight
        self.pi = 1.0 / weight
        self.x = x
        self.aux_names = list(aux_names)
        self.domain = domain
        self.domain_labels = domain_labels

    @property
    def n_rows(self) -> int:
        return self.y.size


def _read_table(path) -> tuple:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        rows = [r for r in reader if r]
    return header, rows


def _numeric(path, header, rows, name) -> np.ndarray:
    if name not in header:
        raise DataError(f"{path}: missing column {name!r}")
    j = header.index(name)
    out = np.empty(len(rows))
    for i, r in enumerate(rows):
        cell = r[j].strip() if j < len(r) else ""
        try:
            out[i] = float(cell)
        except ValueError:
            raise DataError(f"{path}: row {i + 1}, column {name!r}: "
                            f"non-numeric value {cell!r}") from None
        if not np.isfinite(out[i]):
            raise DataError(f"{path}: row {i + 1}, column {name!r}: non-finite value")
    return out


def _labels(path, header, rows, name) -> list:
    if name not in header:
        raise DataError(f"{path}: missing column {name!r}")
    j = header.index(name)
    vals = []
    for i, r in enumerate(rows):
        cell = r[j].strip() if j < len(r) else ""
        if cell == "":
            raise DataError(f"{path}: row {i + 1}, column {name!r}: missing value")
        vals.append(cell)
    return vals


def ingest_csv(path, column_map: dict) -> Dataset:
    """Read a survey CSV. ``column_map`` has keys response, weight, aux and
    optionally domain. Rows are numbered from 1 after the header."""
    header, rows = _read_table(path)
    if not rows:
        raise DataError(f"{path}: no data rows")
    y = _numeric(path, header, rows, column_map["response"])
    w = _numeric(path, header, rows, column_map["weight"])
    bad = np.flatnonzero(w <= 0)
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 1}, column {column_map['weight']!r}: "
                        f"weight must be positive, got {w[bad[0]]:g}")
    x = np.column_stack([_numeric(path, header, rows, a) for a in column_map["aux"]])
    dom = labels = None
    if column_map.get("domain"):
        raw = _labels(path, header, rows, column_map["domain"])
        labels = sorted(set(raw))
        code = {lab: k for k, lab in enumerate(labels)}
        dom = np.array([code[v] for v in raw])
    log.info("read %d rows from %s", len(rows), path)
    return Dataset(y, w, x, column_map["aux"], dom, labels)


class _Population:
    def __init__(self, x, domain_raw=None):
        self.x = x
        self.domain_raw = domain_raw


def _load_totals(ds_cfg: DatasetBlock):
    t = ds_cfg.totals
    if t.xbar_csv is not None:
        header, rows = _read_table(t.xbar_csv)
        if len(rows) != 1:
            raise DataError(f"{t.xbar_csv}: expected exactly one row of auxiliary means")
        xbar = np.array([_numeric(t.xbar_csv, header, rows, a)[0] for a in ds_cfg.aux])
        return xbar, None
    header, rows = _read_table(t.population_csv)
    if not rows:
        raise DataError(f"{t.population_csv}: no data rows")
    x = np.column_stack([_numeric(t.population_csv, header, rows, a) for a in ds_cfg.aux])
    dom = _labels(t.population_csv, header, rows, ds_cfg.domain) if ds_cfg.domain else None
    return x.mean(axis=0), _Population(x, dom)


def _build_sample(ds: Dataset, ds_cfg: DatasetBlock, pop) -> Sample:
    if ds_cfg.population_size is not None:
        N = ds_cfg.population_size
    elif pop is not None:
        N = pop.x.shape[0]
    else:
        N = int(round(ds.weight.sum()))
    if N < ds.n_rows:
        raise DataError(f"population size {N} is smaller than the sample ({ds.n_rows} rows)")
    kind = "srs" if ds_cfg.pairwise == "exact_srs" else "pps"
    if kind == "srs" and not np.allclose(ds.pi, ds.pi[0]):
        raise DataError("pairwise policy exact_srs needs equal weights")
    return Sample(np.arange(ds.n_rows), ds.y, ds.x, np.minimum(ds.pi, 1.0),
                  DesignSpec(kind, ds.n_rows, ds_cfg.pairwise), N, ds.domain)


# --------------------------------------------------------------------------
# Pipelines


def _mcmc(cfg: RunConfig) -> bayes.McmcConfig:
    return bayes.McmcConfig(cfg.mcmc.n_draws, cfg.mcmc.burn_in, cfg.seed, cfg.mcmc.thin)


def scenario_from_config(cfg: RunConfig) -> harness.ScenarioConfig:
    sc = cfg.scenario
    default = harness.LINEAR_METHODS if sc.kind == "linear" else harness.LOGISTIC_METHODS
    return harness.ScenarioConfig(
        kind=sc.kind, N=sc.N, p_star=sc.p_star, p=sc.p, n=sc.n, rho=sc.rho,
        design=sc.design, reps=sc.reps, methods=tuple(cfg.methods or default),
        mcmc=bayes.McmcConfig(cfg.mcmc.n_draws, cfg.mcmc.burn_in, 0, cfg.mcmc.thin),
        seed=cfg.seed, beta0=sc.beta0, noise_sd=sc.noise_sd, size_rate=sc.size_rate,
        cv_folds=sc.cv_folds, n_lambda=sc.n_lambda, level=cfg.level, workers=sc.workers)


def _simulate(cfg: RunConfig, out: Path, timings: dict):
    scen = scenario_from_config(cfg)
    t0 = time.perf_counter()
    table = harness.run_study(scen)
    timings["study"] = time.perf_counter() - t0
    table.write_csv(out / "metrics.csv")
    table.write_csv(out / "metrics_x100.csv", display=True)
    res = table.to_dict()
    del res["runtime"]  # wall-clock time lives in timings; results must be reproducible
    res["notes"] = {"size_rate": scen.rate, "beta0": scen.intercept,
                    "exp_convention": "rate (mean 1/rate)"}
    return res


def _interval(est, var, level):
    half = norm.ppf(0.5 + level / 2) * np.sqrt(max(var, 0.0))
    return {"point": est, "lower": est - half, "upper": est + half, "variance": var}


def _estimate(cfg: RunConfig, sample: Sample, xbar, pop) -> dict:
    dc = cfg.dataset
    aux = AuxTotals(xbar, None if pop is None else pop.x, sample.pop_n)
    methods = cfg.methods or ["HT", "GREG"]
    out = {}
    for m in methods:
        if m == "HT":
            out[m] = _interval(ht_mean(sample), ht_variance(sample), cfg.level)
            continue
        if dc.model == "logistic":
            if pop is None:
                raise ConfigError("logistic working models need totals.population_csv")
            model = glm.Logistic()
            if m == "GREG":
                beta = glm.solve_ee(sample, model).beta
            elif m in ("GREG-L", "GREG-R"):
                fam = "lasso" if m == "GREG-L" else "ridge"
                lam = glm.cv_select_lambda_glm(sample, fam, seed=cfg.seed)
                beta = glm.fit_penalized_glm(sample, regfit.make_penalty(fam, lam))
            else:
                raise ConfigError(f"method {m!r} is not available for logistic models")
            est = glm.model_assisted_mean(pop.x, sample, model, beta)
            out[m] = _interval(est, glm.variance_e_m(sample, model, beta), cfg.level)
            continue
        if m == "GREG":
            beta1 = regfit.fit_wls(sample).beta1
        elif m in ("GREG-L", "GREG-R"):
            fam = "lasso" if m == "GREG-L" else "ridge"
            lam = regfit.cv_select_lambda(sample, fam, seed=cfg.seed)
            beta1 = regfit.fit_penalized(sample, regfit.make_penalty(fam, lam)).beta1
        elif m == "GREG-V":
            beta1 = regfit.forward_select(sample)[1].full_beta1(sample.p)
        else:
            raise ConfigError(f"unknown estimate method {m!r}")
        out[m] = _interval(greg_mean(sample, aux, beta1), variance_e(sample, beta1), cfg.level)
    return out


def _prior(cfg: RunConfig, sample: Sample, fit):
    pc = cfg.prior
    if pc.kind == "flat":
        return bayes.FlatPrior()
    if pc.kind == "horseshoe":
        return bayes.HorseshoePrior()
    if pc.a is not None:
        return bayes.LaplacePrior(a=pc.a, b=pc.b)
    if cfg.dataset.model == "logistic":
        lam = glm.cv_select_lambda_glm(sample, "lasso", seed=cfg.seed)
        return bayes.LaplacePrior(a=max(glm.glm_prior_lambda(sample, fit, lam)**2, 1e-8), b=pc.b)
    lam = regfit.cv_select_lambda(sample, "lasso", seed=cfg.seed)
    return bayes.laplace_prior_from_cv(sample, fit, lam, pc.b)


def _summary(draws, level):
    point, lo, hi = bayes.summarize(draws, level)
    return {"point": point, "lower": lo, "upper": hi, "n_draws": int(draws.ybar_draws.size)}


def _domain_aux(ds: Dataset, dc: DatasetBlock, pop) -> dict:
    if pop is None or pop.domain_raw is None:
        raise ConfigError("domain estimation needs totals.population_csv with the domain column")
    raw = np.array(pop.domain_raw)
    out = {}
    for k, lab in enumerate(ds.domain_labels):
        rows = raw == lab
        if not rows.any():
            raise DataError(f"domain {lab!r} is absent from the population file")
        out[k] = AuxTotals(pop.x[rows].mean(axis=0), None, int(rows.sum()))
    return out


def _posterior(cfg: RunConfig, sample: Sample, ds: Dataset, xbar, pop) -> dict:
    dc = cfg.dataset
    mcmc = _mcmc(cfg)
    if dc.model == "logistic":
        if pop is None:
            raise ConfigError("logistic working models need totals.population_csv")
        if dc.domain:
            raise ConfigError("domain estimation is only available with linear working models")
        model = glm.Logistic()
        fit = glm.solve_ee(sample, model)
        draws = glm.run_posterior_glm(sample, pop.x, model, _prior(cfg, sample, fit), mcmc, fit)
        return {"overall": _summary(draws, cfg.level), "prior": cfg.prior.kind}
    aux = AuxTotals(xbar, None, sample.pop_n)
    fit = regfit.fit_wls(sample)
    prior = _prior(cfg, sample, fit)
    res = {"overall": _summary(bayes.run_posterior(sample, aux, prior, mcmc, fit=fit), cfg.level),
           "prior": cfg.prior.kind}
    if dc.domain:
        per = bayes.run_posterior_domains(sample, _domain_aux(ds, dc, pop), prior, mcmc)
        res["domains"] = {ds.domain_labels[k]: _summary(d, cfg.level) for k, d in per.items()}
    return res


def dispatch(cfg: RunConfig) -> dict:
    """Run the configured pipeline and write its reports; returns the report."""
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    t0 = time.perf_counter()
    if cfg.command == "simulate":
        results = _simulate(cfg, out, timings)
    else:
        dc = cfg.dataset
        cols = {"response": dc.response, "weight": dc.weight, "aux": dc.aux, "domain": dc.domain}
        ds = ingest_csv(dc.path, cols)
        xbar, pop = _load_totals(dc)
        sample = _build_sample(ds, dc, pop)
        results = {"n_rows": ds.n_rows, "population_size": sample.pop_n}
        if cfg.command == "estimate":
            results["methods"] = _estimate(cfg, sample, xbar, pop)
            _write_interval_csv(out / "estimates.csv", results["methods"])
        else:
            results.update(_posterior(cfg, sample, ds, xbar, pop))
            rows = {"overall": results["overall"], **results.get("domains", {})}
            _write_interval_csv(out / "posterior.csv", rows)
    timings["total"] = time.perf_counter() - t0
    report = {"config": cfg.model_dump(mode="json"), "results": results, "seed": cfg.seed,
              "version": __version__, "timings": timings}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, default=_jsonable)
    return report


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_interval_csv(path, rows: Dict[str, dict]):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["name", "point", "lower", "upper"])
        for name, r in rows.items():
            wr.writerow([name] + [f"{float(r[k]):.4g}" for k in ("point", "lower", "upper")])


# --------------------------------------------------------------------------
# Entry point


def load_config(path, *, seed=None, reps=None, out=None, paper_scale=False) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if isinstance(raw, dict) and "config" in raw and "results" in raw:
        raw = raw["config"]  # a previous report
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw.setdefault("output", {})["dir"] = out
    if paper_scale:
        raw.setdefault("scenario", {})["reps"] = FULL_REPS
        raw.setdefault("mcmc", {}).update(n_draws=FULL_DRAWS, burn_in=FULL_BURN)
    if reps is not None:
        raw.setdefault("scenario", {})["reps"] = reps
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_pydantic_message(exc)) from None


def _pydantic_message(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"])
        parts.append(f"{loc}: {e['msg']}" if loc else e["msg"])
    return "; ".join(parts)


def _parser():
    ap = argparse.ArgumentParser(prog="abreg", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="run config JSON (or a previous report)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--reps", type=int, help="override scenario.reps")
    ap.add_argument("--out", help="override output.dir")
    ap.add_argument("--paper-scale", action="store_true",
                    help="1000 replications and 5000/500 MCMC draws")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        cfg = load_config(args.config, seed=args.seed, reps=args.reps, out=args.out,
                          paper_scale=args.paper_scale)
        stage = cfg.command
        dispatch(cfg)
    except AbregError as exc:
        err = {"error": type(exc).__name__, "stage": stage, "message": str(exc),
               "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        err = {"error": type(exc).__name__, "stage": stage, "message": str(exc), "exit_code": 4}
        print(json.dumps(err), file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
