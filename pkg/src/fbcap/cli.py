"""Command-line scenario runner.

    fbcap finite|asymptotic|classify|verify|simulate --config PATH [--seed U64]
          [--out DIR] [--bits] [--grid N] [--n N]

Exit status is 0 on success, 2 when the problem is infeasible (budget
exceeded, empty admissible set) and 1 on any other error.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import click
import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import capacity_asymptotic as ca
from . import capacity_finite as cf
from . import oracle
from .filtering import (
    InputStrategy,
    noise_filter,
    output_filter,
    path_statistics,
    simulate_paths,
    state_feedback_filter,
    trajectory_table,
)
from .noise_models import (
    ArmaParams,
    PossExampleParams,
    PoSsRealization,
    RealizationError,
    arma_to_poss,
    invertibility_predicate,
    poss_example_to_realization,
)
from .riccati import RiccatiProblem, are_solve, classify, predict_convergence

CONFIG_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2

Number = float
Matrix = Union[float, List[float], List[List[float]], List[List[List[float]]]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ArmaModel(_Strict):
    kind: Literal["arma"]
    a: float
    c: float
    K_W: float = Field(gt=0)
    K_V0: float = Field(default=0.0, ge=0)
    K_W0: float = Field(default=0.0, ge=0)
    initial_state: Literal["distributional", "fixed"] = "distributional"
    s: float = 0.0


class PossModel(_Strict):
    kind: Literal["poss_example"]
    a: float
    c: float
    b1: float
    b2: float
    d1: float
    d2: float
    K_W1: float = Field(ge=0)
    K_W2: float = Field(ge=0)
    K_S1: float = Field(default=0.0, ge=0)
    initial_state: Literal["distributional", "fixed"] = "distributional"


class RawModel(_Strict):
    kind: Literal["raw_poss"]
    A: Matrix
    B: Matrix
    C: Matrix
    N: Matrix
    K_W: Matrix
    mu_S1: Optional[List[float]] = None
    K_S1: Optional[Matrix] = None
    horizon: Optional[int] = Field(default=None, ge=1)
    initial_state: Literal["distributional", "fixed"] = "distributional"


class StrategySpec(_Strict):
    mode: Literal["optimize", "explicit"] = "optimize"
    Lambda: Optional[Matrix] = None
    K_Z: Optional[Union[float, List[float]]] = None

    @model_validator(mode="after")
    def _explicit_needs_values(self):
        if self.mode == "explicit" and (self.Lambda is None or self.K_Z is None):
            raise ValueError("explicit strategies need both Lambda and K_Z")
        return self


class Options(_Strict):
    seed: int = Field(default=0, ge=0, lt=2**64)
    restarts: int = Field(default=8, ge=0)
    grid: int = Field(default=201, ge=2)
    top_m: int = Field(default=5, ge=1)
    lambda_max: Optional[float] = Field(default=None, gt=0)
    n_paths: int = Field(default=100_000, ge=1)
    verify_n: int = Field(default=6, ge=1, le=32)
    verify_tol: float = Field(default=1e-8, gt=0)
    max_horizon: int = Field(default=512, ge=1)
    mc_sigmas: float = Field(default=3.0, gt=0)


class Scenario(_Strict):
    fbcap_config_version: int
    model: Union[ArmaModel, PossModel, RawModel] = Field(discriminator="kind")
    formulation: cf.Formulation = cf.Formulation.CASE1
    horizon: int = Field(default=10, ge=1)
    kappa: float = Field(default=1.0, ge=0)
    strategy: StrategySpec = StrategySpec()
    options: Options = Options()
    output_dir: str = "fbcap_out"

    @field_validator("fbcap_config_version")
    @classmethod
    def _version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v}, expected {CONFIG_VERSION}")
        return v


class ConfigError(ValueError):
    pass


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def load_scenario(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return scenario_from_dict(data, overrides)


def scenario_from_dict(data: dict, overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    data = dict(data)
    if overrides:
        opts = dict(data.get("options") or {})
        for key, val in overrides.items():
            if val is None:
                continue
            if key in ("output_dir", "horizon"):
                data[key] = val
            else:
                opts[key] = val
        data["options"] = opts
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from exc


def _realization(m) -> PoSsRealization:
    if isinstance(m, ArmaModel):
        return arma_to_poss(ArmaParams(m.a, m.c, m.K_W, m.K_V0, m.K_W0), initial_state=m.initial_state, s=m.s)
    if isinstance(m, PossModel):
        p = PossExampleParams(m.a, m.c, m.b1, m.b2, m.d1, m.d2, m.K_W1, m.K_W2)
        return poss_example_to_realization(p, K_S1=m.K_S1, initial_state=m.initial_state)
    return PoSsRealization.build(m.A, m.B, m.C, m.N, m.K_W, m.mu_S1, m.K_S1, m.horizon, m.initial_state)


def build_realization(sc: Scenario) -> PoSsRealization:
    r = _realization(sc.model)
    if sc.formulation is cf.Formulation.CASE2 and not invertibility_predicate(r):
        raise ConfigError("formulation: case2 needs a realization whose state is recoverable from past noise samples")
    return r


def explicit_strategy(sc: Scenario, r: PoSsRealization, n: int) -> InputStrategy:
    spec = sc.strategy
    L = np.asarray(spec.Lambda, dtype=float)
    KZ = np.asarray(spec.K_Z, dtype=float)
    if L.ndim <= 1 and L.size == r.n_s:
        L = np.repeat(L.reshape(1, -1), n, axis=0)
    if KZ.ndim == 0:
        KZ = np.full(n, float(KZ))
    return InputStrategy(L, KZ)


def _clean(obj):
    """Make a structure JSON-safe: NaN/inf become null, numpy scalars become floats."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_clean(payload), sort_keys=True, indent=2, allow_nan=False) + "\n")


def _write_csv(path: Path, header: List[str], rows: List[list]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if isinstance(v, float) and not math.isfinite(v) else (repr(v) if isinstance(v, float) else v) for v in row])


def _echo(sc: Scenario) -> dict:
    return sc.model_dump(mode="json")


class _Infeasible(Exception):
    pass


def _out_dir(sc: Scenario) -> Path:
    out = Path(sc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bits_scale(bits: bool) -> float:
    return 1.0 / math.log(2.0) if bits else 1.0


def run_finite(sc: Scenario, bits: bool) -> dict:
    r = build_realization(sc)
    n = sc.horizon
    if sc.strategy.mode == "explicit":
        res = cf.evaluate_rate(r, explicit_strategy(sc, r, n), sc.formulation)
    else:
        opts = cf.FiniteOptions(restarts=sc.options.restarts, seed=sc.options.seed,
                                lambda_bound=sc.options.lambda_max, max_horizon=sc.options.max_horizon)
        res = cf.optimize_finite(r, sc.kappa, n, sc.formulation, opts)
    within = res.power_used <= sc.kappa + 1e-9
    out = _out_dir(sc)
    payload = {"command": "finite", "scenario": _echo(sc), "result": res.to_dict(bits), "within_budget": within}
    _write_json(out / "finite.json", payload)
    header = ["t", "K_I", "K_Ihat", "power", "K_Z"] + [f"Lambda_{i + 1}" for i in range(r.n_s)]
    rows = [[s.t, s.K_I, s.K_Ihat, s.power, float(res.strategy.K_Z[s.t - 1])] + res.strategy.Lambda[s.t - 1].tolist()
            for s in res.per_step_terms]
    _write_csv(out / "finite_terms.csv", header, rows)
    if sc.formulation is cf.Formulation.CASE2:
        noise = noise_filter(r, n, sigma1=np.zeros((r.n_s, r.n_s)))
        traj = state_feedback_filter(r, res.strategy)
    else:
        sigma1 = np.zeros((r.n_s, r.n_s)) if sc.formulation is cf.Formulation.CASE1_FIXED_S else None
        noise = noise_filter(r, n, sigma1=sigma1)
        traj = output_filter(r, res.strategy, noise)
    _write_csv(out / "trajectory.csv", *trajectory_table(noise, traj))
    if not within:
        raise _Infeasible(f"strategy uses power {res.power_used!r} above the budget {sc.kappa!r}")
    return {"rate": res.rate_nats_per_step * _bits_scale(bits), "power": res.power_used}


def run_asymptotic(sc: Scenario, bits: bool) -> dict:
    r = build_realization(sc)
    out = _out_dir(sc)
    if sc.strategy.mode == "explicit":
        strat = explicit_strategy(sc, r, 1)
        pt = ca.evaluate_point(r, strat.Lambda[0], float(strat.K_Z[0]), sc.kappa)
        _write_json(out / "asymptotic.json", {"command": "asymptotic", "scenario": _echo(sc), "point": pt.to_dict(bits)})
        if not pt.feasible:
            raise _Infeasible("; ".join(pt.reasons))
        return {"rate": pt.rate * _bits_scale(bits), "power": pt.power}
    opts = ca.AsymptoticOptions(grid=sc.options.grid, top_m=sc.options.top_m, lambda_max=sc.options.lambda_max)
    opt = ca.optimize_asymptotic(r, sc.kappa, opts)
    payload = {
        "command": "asymptotic",
        "scenario": _echo(sc),
        "status": opt.status,
        "best": None if opt.best is None else opt.best.to_dict(bits),
        "lambda_bounds": list(opt.lambda_bounds),
        "K_Z_bounds": list(opt.kz_bounds),
        "refinements": opt.refinements,
    }
    _write_json(out / "asymptotic.json", payload)
    header = [f"Lambda_{i + 1}" for i in range(r.n_s)] + ["K_Z", "feasible", "rate", "power"]
    scale = _bits_scale(bits)
    rows = [list(lam) + [z, int(f), x * scale, p] for lam, z, f, x, p in opt.grid_rows]
    _write_csv(out / "asymptotic_grid.csv", header, rows)
    if opt.status != "ok":
        raise _Infeasible("no admissible time-invariant strategy within the search box")
    return {"rate": opt.best.rate * scale, "power": opt.best.power}


def run_classify(sc: Scenario, bits: bool) -> dict:
    r = build_realization(sc)
    out = _out_dir(sc)
    payload: Dict[str, Any] = {"command": "classify", "scenario": _echo(sc), "invertible": invertibility_predicate(r)}
    if r.time_invariant:
        prob = ca.noise_problem(r)
        rep = classify(prob)
        pred, case = predict_convergence(prob, r.initial_covariance())
        sol = are_solve(prob, r.initial_covariance())
        payload["noise"] = {"report": rep.to_dict(), "prediction": pred, "case": case, "solution": sol.to_dict()}
        noise = ca.noise_are(r)
        payload["noise"]["entropy_rate"] = None if noise.entropy_rate is None else noise.entropy_rate * _bits_scale(bits)
        if sc.strategy.mode == "explicit" and noise.status == "ok":
            strat = explicit_strategy(sc, r, 1)
            iprob = ca.input_problem(r, strat.Lambda[0], float(strat.K_Z[0]), noise)
            ipred, icase = predict_convergence(iprob)
            payload["input"] = {"report": classify(iprob).to_dict(), "prediction": ipred, "case": icase,
                                "solution": are_solve(iprob).to_dict()}
    else:
        payload["noise"] = None
        payload["note"] = "structural tests apply to time-invariant realizations"
    _write_json(out / "classify.json", payload)
    return {"detectable": payload["noise"]["report"]["detectable"] if payload["noise"] else None}


def verification_report(r: PoSsRealization, strat: InputStrategy, formulation: cf.Formulation, tol: float) -> dict:
    """Oracle cross-checks of the sequential formulas on a short horizon."""
    n = strat.n
    checks = []

    def add(name, a, b):
        checks.append({"check": name, "sequential": a, "oracle": b, "abs_diff": abs(a - b), "passed": abs(a - b) <= tol})

    sigma1 = None if formulation is cf.Formulation.CASE1 else np.zeros((r.n_s, r.n_s))
    noise = noise_filter(r, n, sigma1=sigma1)
    K_V = oracle.assemble_noise_covariance(r, n, K_S1=sigma1)
    add("sum log K_Ihat = log|K_V|", float(np.sum(np.log(noise.K_Ihat))), oracle.logdet(K_V))
    res = cf.evaluate_rate(r, strat, formulation)
    if formulation is not cf.Formulation.CASE2:
        _, K_Y, _ = oracle.joint_covariances(r, strat, formulation.value)
        add("sum log K_I = log|K_Y|", float(sum(math.log(s.K_I) for s in res.per_step_terms)), oracle.logdet(K_Y))
    form = oracle.strategy_to_cover_pombra(r, strat, formulation.value)
    add("n * rate = Cover-Pombra objective", n * res.rate_nats_per_step, oracle.cover_pombra_objective(form))
    add("power = Cover-Pombra power", res.power_used, oracle.cover_pombra_power(form))
    add("rate = joint log-det rate", res.rate_nats_per_step, oracle.oracle_rate(r, strat, formulation.value))
    return {"n": n, "tolerance": tol, "checks": checks, "passed": all(c["passed"] for c in checks)}


def _default_strategy(sc: Scenario, r: PoSsRealization, n: int) -> InputStrategy:
    if sc.strategy.mode == "explicit":
        s = explicit_strategy(sc, r, max(n, 1))
        return InputStrategy(s.Lambda[:n], s.K_Z[:n])
    return InputStrategy.constant(np.full(r.n_s, 0.5), sc.kappa, n)


def run_verify(sc: Scenario, bits: bool, n: Optional[int]) -> dict:
    r = build_realization(sc)
    n = n or sc.options.verify_n
    strat = _default_strategy(sc, r, n)
    rep = verification_report(r, strat, sc.formulation, sc.options.verify_tol)
    _write_json(_out_dir(sc) / "verify.json", {"command": "verify", "scenario": _echo(sc), "report": rep})
    if not rep["passed"]:
        raise click.ClickException("oracle cross-check failed: " + ", ".join(c["check"] for c in rep["checks"] if not c["passed"]))
    return {"passed": True, "checks": len(rep["checks"])}


def run_simulate(sc: Scenario, bits: bool) -> dict:
    r = build_realization(sc)
    n = sc.horizon
    if sc.strategy.mode == "explicit":
        strat = explicit_strategy(sc, r, n)
    else:
        opts = cf.FiniteOptions(restarts=sc.options.restarts, seed=sc.options.seed, lambda_bound=sc.options.lambda_max)
        strat = cf.optimize_finite(r, sc.kappa, n, sc.formulation, opts).strategy
    form = sc.formulation
    if form is cf.Formulation.CASE2:
        traj = state_feedback_filter(r, strat)
        K_Ihat = np.array([r.noise_variance(t) for t in range(1, n + 1)])
    else:
        sigma1 = np.zeros((r.n_s, r.n_s)) if form is cf.Formulation.CASE1_FIXED_S else None
        nf = noise_filter(r, n, sigma1=sigma1)
        traj = output_filter(r, strat, nf)
        K_Ihat = nf.K_Ihat
    paths = simulate_paths(r, strat, sc.options.seed, sc.options.n_paths, form.value)
    stats = path_statistics(paths, K_Ihat, traj.K_I, traj.power)
    k = sc.options.mc_sigmas
    worst = max(abs(e["estimate"] - e["value"]) / e["se"] for group in stats.values() for e in group)
    out = _out_dir(sc)
    _write_json(out / "simulate.json", {"command": "simulate", "scenario": _echo(sc), "strategy": strat.to_dict(),
                                        "statistics": stats, "max_z": worst, "within_sigmas": worst <= k})
    rows = []
    for key, group in stats.items():
        for e in group:
            rows.append([key, e["t"], e.get("lag", ""), e["estimate"], e["value"], e["se"]])
    _write_csv(out / "simulate.csv", ["statistic", "t", "lag", "estimate", "value", "se"], rows)
    return {"max_z": worst, "n_paths": sc.options.n_paths}


def _common(f):
    f = click.option("--config", "config", required=True, type=click.Path(exists=True, dir_okay=False))(f)
    f = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="RNG seed (unsigned 64-bit)")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="output directory")(f)
    f = click.option("--bits", is_flag=True, help="report rates in bits instead of nats")(f)
    f = click.option("--grid", type=click.IntRange(2, None), default=None, help="grid points per axis")(f)
    f = click.option("--n", "n", type=click.IntRange(1, None), default=None, help="horizon override")(f)
    return f


def _scenario(config, seed, out, grid, n=None, n_is_horizon=True) -> Scenario:
    overrides = {"seed": seed, "output_dir": out, "grid": grid}
    if n_is_horizon:
        overrides["horizon"] = n
    return load_scenario(config, overrides)


def _report(summary: dict) -> None:
    click.echo(json.dumps(_clean(summary), sort_keys=True))


@click.group()
def cli():
    """Feedback capacity of Gaussian channels with state-space noise."""


@cli.command()
@_common
def finite(config, seed, out, bits, grid, n):
    """Finite-horizon rate of a strategy, or its maximization."""
    _report(run_finite(_scenario(config, seed, out, grid, n), bits))


@cli.command()
@_common
def asymptotic(config, seed, out, bits, grid, n):
    """Time-invariant strategies: admissible-set scan and best rate."""
    _report(run_asymptotic(_scenario(config, seed, out, grid, n), bits))


@cli.command(name="classify")
@_common
def classify_cmd(config, seed, out, bits, grid, n):
    """Detectability and stabilizability of the Riccati equations."""
    _report(run_classify(_scenario(config, seed, out, grid, n), bits))


@cli.command()
@_common
def verify(config, seed, out, bits, grid, n):
    """Cross-check sequential formulas against covariance oracles."""
    _report(run_verify(_scenario(config, seed, out, grid, n_is_horizon=False), bits, n))


@cli.command()
@_common
def simulate(config, seed, out, bits, grid, n):
    """Monte-Carlo validation of the closed-loop system."""
    _report(run_simulate(_scenario(config, seed, out, grid, n), bits))


def main(argv: Optional[List[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name="fbcap", standalone_mode=False)
    except (_Infeasible, cf.InfeasibleError, ca.EmptyFeasibleSet) as exc:
        click.echo(f"infeasible: {exc}", err=True)
        return EXIT_INFEASIBLE
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_ERROR
    except (ConfigError, RealizationError, ValueError, ArithmeticError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
