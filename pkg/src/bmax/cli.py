"""Command-line front end.

    bmax solve          --input data.csv --method gma-bmax --k 150 --out runs/a
    bmax duality-check  --input data.csv --nu 0.5 --omega-sq 1
    bmax experiment     --preset exp1 --replicates 100 --workers 4 --out runs/exp1
    bmax oracle-check   --preset exp1 --replicates 200 --delta 0.1

Every run writes ``<out>/summary.json`` with the fully resolved configuration
under ``"config"``; passing that file back through ``--config`` reproduces the
run. Flags override values read from ``--config``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver
non-convergence, 5 duality check failed, 6 oracle check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import (
    AggregationParams,
    DataError,
    Dictionary,
    Entropy,
    Observation,
    SimplexWeights,
    load_csv,
    mse,
    regret,
)
from .duality import solve_saddle
from .experiments import (
    CHECKPOINTS,
    EXP1_BOUNDARIES,
    EXP2_BOUNDARIES,
    PAPER_METHODS,
    PRESETS,
    SIGMA_OVER_ZETA_NORM,
    CVMethod,
    MethodConfig,
    ScenarioSpec,
    check_oracle_inequality,
    cross_validate_omega,
    cumulative_frequency,
    generate_scenario,
    run_replications,
)
from .objectives import curvature, log_j
from .solvers import (
    ConvergenceError,
    ExactMethod,
    ExactSolveOptions,
    SolveTrace,
    gma_0,
    gma_bmax,
    solve_bmax_exact,
    solve_ewma,
    solve_star,
)

log = logging.getLogger("bmax")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED, EXIT_DUALITY, EXIT_ORACLE = 0, 2, 3, 4, 5, 6

COMMANDS = ("solve", "duality-check", "experiment", "oracle-check")
SOLVE_METHODS = ("bmax-exact", "gma-bmax", "gma-0", "ewma", "star", "proj")
LINEAR_METHODS = ("gma-0", "proj")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    scenario: dict | None = None
    replicate: int = 0
    seed: int = 0
    method: str = "gma-bmax"
    nu: float = 0.5
    omega_sq: float | None = None
    entropy: str | None = None
    prior: list[float] | None = None
    k_max: int = 150
    cv_grid: list[float] | None = None
    cv_folds: int = 10
    exact: dict = field(default_factory=lambda: {
        "grad_tolerance": 1e-10, "max_iterations": 100_000, "method": "fixed-point"})
    tolerance: float = 1e-6
    methods: list[dict] | None = None
    replicates: int | None = None
    checkpoints: list[int] = field(default_factory=lambda: list(CHECKPOINTS))
    boundaries: list[float] | None = None
    delta: float = 0.1
    out: str = "out"

    def to_dict(self) -> dict:
        return asdict(self)

    # --- resolution ------------------------------------------------------------

    def resolve(self) -> "RunConfig":
        """Fill command-dependent defaults and validate; raises ConfigError."""
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if (self.input is None) == (self.scenario is None):
            raise ConfigError("give exactly one of an input CSV or a scenario (--preset / config)")
        if self.command in ("experiment", "oracle-check") and self.scenario is None:
            raise ConfigError(f"{self.command} needs a scenario")
        if self.scenario is not None:
            sc = dict(self.scenario)
            sc["seed"] = self.seed
            try:
                self.scenario = ScenarioSpec.from_dict(sc).to_dict()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad scenario: {exc}") from None
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.command == "solve" and self.method not in SOLVE_METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {SOLVE_METHODS}")
        if self.entropy is None:
            linear = self.command == "solve" and self.method in LINEAR_METHODS
            self.entropy = "linear" if linear else "kl"
        try:
            entropy = Entropy.parse(self.entropy)
        except DataError as exc:
            raise ConfigError(str(exc)) from None
        self.entropy = entropy.value
        if self.command == "duality-check" and entropy is not Entropy.KL:
            raise ConfigError("T and S are defined only for the KL entropy; use --entropy kl")
        if self.command == "solve" and self.method in LINEAR_METHODS and entropy is not Entropy.LINEAR:
            raise ConfigError(f"{self.method} works with the linear entropy only")
        if not 0.0 <= self.nu < 1.0:
            raise ConfigError("nu must lie in [0, 1)")
        if self.omega_sq is not None and not self.omega_sq > 0:
            raise ConfigError("omega_sq must be positive")
        if self.k_max < 1:
            raise ConfigError("k must be at least 1")
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        self.exact = {**RunConfig.__dataclass_fields__["exact"].default_factory(), **(self.exact or {})}
        try:
            ExactSolveOptions(**self._exact_kwargs())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad exact-solver options: {exc}") from None
        if self.command in ("solve", "duality-check") and self.omega_sq is None and self.cv_grid is None:
            self.omega_sq = 1.0
        if self.command == "experiment":
            self.replicates = 100 if self.replicates is None else self.replicates
            if self.methods is None:
                self.methods = [m.to_dict() for m in PAPER_METHODS]
            try:
                self.methods = [MethodConfig.from_dict(m).to_dict() for m in self.methods]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad method list: {exc}") from None
            if self.boundaries is None:
                exp2_like = self.scenario["s"] == SIGMA_OVER_ZETA_NORM
                self.boundaries = list(EXP2_BOUNDARIES if exp2_like else EXP1_BOUNDARIES)
            if any(b2 < b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
                raise ConfigError("boundaries must be sorted ascending")
        elif self.command == "oracle-check":
            self.replicates = 200 if self.replicates is None else self.replicates
            if not 0 < self.nu < 1:
                raise ConfigError("oracle-check needs nu in (0, 1)")
            if self.omega_sq is None:
                sigma = self.scenario["sigma"]
                self.omega_sq = sigma * sigma / min(self.nu, 1 - self.nu) or 1.0
        if self.replicates is not None and self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.cv_grid is not None and not self.cv_grid:
            raise ConfigError("cv_grid is empty")
        return self

    def _exact_kwargs(self) -> dict:
        kw = dict(self.exact)
        if "method" in kw:
            try:
                kw["method"] = ExactMethod(kw["method"])
            except ValueError:
                raise ConfigError(f"unknown exact method {kw['method']!r}") from None
        return kw

    def exact_options(self) -> ExactSolveOptions:
        return ExactSolveOptions(**self._exact_kwargs())

    def scenario_spec(self) -> ScenarioSpec:
        return ScenarioSpec.from_dict(self.scenario)


# --- config loading --------------------------------------------------------------

def _read_config(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]  # a summary.json from an earlier run
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def _read_prior(path: str) -> list[float]:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise DataError(f"cannot read prior {path}: {exc}") from None
    if not rows or rows[0][0].strip() != "prior":
        raise DataError(f"{path}: expected a single column headed 'prior'")
    try:
        return [float(r[0]) for r in rows[1:]]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _csv_floats(text: str, kind=float) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def build_config(args: argparse.Namespace) -> RunConfig:
    data = _read_config(args.config) if args.config else {}
    data["command"] = args.command
    if args.preset and args.input:
        raise ConfigError("--preset and --input are mutually exclusive")
    if args.preset:
        data["scenario"] = PRESETS[args.preset].to_dict()
        data["input"] = None
    if args.input is not None:
        data["scenario"] = None
    if "seed" not in data and isinstance(data.get("scenario"), dict) and "seed" in data["scenario"]:
        data["seed"] = data["scenario"]["seed"]
    over = {
        "input": args.input, "replicate": getattr(args, "replicate", None), "seed": args.seed,
        "nu": args.nu, "omega_sq": args.omega_sq, "entropy": args.entropy,
        "k_max": getattr(args, "k", None), "cv_folds": getattr(args, "cv_folds", None),
        "tolerance": getattr(args, "tolerance", None), "method": getattr(args, "method", None),
        "replicates": getattr(args, "replicates", None), "delta": getattr(args, "delta", None),
        "out": args.out,
    }
    data.update({k: v for k, v in over.items() if v is not None})
    if getattr(args, "cv_grid", None):
        data["cv_grid"] = _csv_floats(args.cv_grid)
    if getattr(args, "checkpoints", None):
        data["checkpoints"] = _csv_floats(args.checkpoints, int)
    if getattr(args, "methods", None):
        data["methods"] = [{"name": m} for m in args.methods.split(",") if m.strip()]
    if getattr(args, "exact_method", None):
        data["exact"] = {**data.get("exact", RunConfig("solve").exact), "method": args.exact_method}
    if getattr(args, "prior", None):
        data["prior"] = _read_prior(args.prior)
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.resolve()


# --- output helpers --------------------------------------------------------------

def _prepare_out(out: str) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, allow_nan=True) + "\n")


def _write_trace(path: Path, trace: SolveTrace | None):
    rows = [] if trace is None else [(r.k, r.index, r.alpha, r.objective) for r in trace.iterations]
    _write_csv(path / "trace.csv", ["k", "index", "alpha", "objective"], rows)


def _floats(x) -> list[float]:
    return [float(v) for v in np.asarray(x, dtype=float)]


# --- commands --------------------------------------------------------------------

def _load_problem(cfg: RunConfig) -> tuple[Dictionary, Observation]:
    if cfg.input is not None:
        return load_csv(cfg.input)
    return generate_scenario(cfg.scenario_spec(), cfg.replicate)


def _params(cfg: RunConfig, dictionary: Dictionary, omega_sq: float) -> AggregationParams:
    prior = SimplexWeights.flat(dictionary.M) if cfg.prior is None else SimplexWeights(cfg.prior)
    if len(prior) != dictionary.M:
        raise DataError(f"prior has {len(prior)} entries, dictionary has M={dictionary.M}")
    return AggregationParams(cfg.nu, omega_sq, prior, cfg.entropy)


def _omega_sq(cfg: RunConfig, dictionary: Dictionary, obs: Observation, method: str) -> tuple[float, bool]:
    """omega^2 from the config, or tuned by CV over ``cv_grid`` when none is set."""
    if cfg.omega_sq is not None or cfg.cv_grid is None or method not in ("ewma", "gma-bmax", "bmax-exact"):
        return (1.0 if cfg.omega_sq is None else cfg.omega_sq), False
    base = _params(cfg, dictionary, 1.0)
    cv = CVMethod.EWMA if method == "ewma" else CVMethod.GMA_BMAX
    return cross_validate_omega(dictionary, obs, base, cfg.cv_grid, cfg.cv_folds, cv, cfg.seed), True


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    dictionary, obs = _load_problem(cfg)
    omega_sq, tuned = _omega_sq(cfg, dictionary, obs, cfg.method)
    params = _params(cfg, dictionary, omega_sq)
    summary = {"config": cfg.to_dict(), "method": cfg.method, "omega_sq": omega_sq,
               "omega_sq_tuned": tuned, "n": dictionary.n, "M": dictionary.M}
    trace, weights, status = None, None, EXIT_OK
    method = cfg.method
    if method == "bmax-exact":
        try:
            est, trace = solve_bmax_exact(dictionary, obs, params, cfg.exact_options())
        except ConvergenceError as err:
            est, trace, status = err.psi, err.trace, EXIT_NONCONVERGED
            summary["error"] = str(err)
        weights = trace.final_weights
        summary["grad_norm"] = trace.grad_norm
        summary["converged"] = trace.converged
    elif method == "gma-bmax":
        est, trace = gma_bmax(dictionary, obs, params, cfg.k_max)
        weights = trace.final_weights
    elif method in LINEAR_METHODS:
        if method == "proj":
            params = params.replace(nu=0.0, prior=SimplexWeights.flat(dictionary.M))
        weights, est, trace = gma_0(dictionary, obs, params, cfg.k_max)
    elif method == "ewma":
        est, weights = solve_ewma(dictionary, obs, params)
    else:
        est, (k1, k2, alpha) = solve_star(dictionary, obs)
        summary["star"] = {"k1": k1, "k2": k2, "alpha": alpha}
    summary["estimate"] = _floats(est)
    if weights is not None:
        summary["weights"] = _floats(weights.w)
    if trace is not None and trace.iterations:
        summary["final_objective"] = trace.iterations[-1].objective
    if params.entropy is Entropy.KL:
        summary["log_j"] = log_j(est, dictionary, obs, params)
        c = curvature(dictionary, params)
        summary["curvature"] = {"a1": c.a1, "a2": c.a2, "a3": c.a3}
    summary["empirical_mse"] = mse(est, obs.y)
    if obs.truth is not None:
        summary["mse"] = mse(est, obs.truth)
        summary["regret"] = regret(est, obs.truth, dictionary)
    _write_trace(out, trace)
    _write_json(out / "summary.json", summary)
    log.info("%s: wrote %s", method, out)
    return status


def cmd_duality_check(cfg: RunConfig, out: Path) -> int:
    dictionary, obs = _load_problem(cfg)
    omega_sq, tuned = _omega_sq(cfg, dictionary, obs, "bmax-exact")
    params = _params(cfg, dictionary, omega_sq)
    if params.nu <= 0:
        raise ConfigError("the duality check needs nu in (0, 1)")
    summary = {"config": cfg.to_dict(), "omega_sq": omega_sq, "omega_sq_tuned": tuned}
    try:
        report = solve_saddle(dictionary, obs, params, cfg.tolerance, cfg.exact_options())
    except ConvergenceError as err:
        summary["error"] = str(err)
        summary["grad_norm"] = err.grad_norm
        _write_json(out / "summary.json", summary)
        return EXIT_NONCONVERGED
    ok = report.within(cfg.tolerance)
    summary["report"] = report.as_dict()
    summary["passed"] = ok
    _write_json(out / "summary.json", summary)
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK if ok else EXIT_DUALITY


def cmd_experiment(cfg: RunConfig, out: Path, workers: int) -> int:
    spec = cfg.scenario_spec()
    methods = [MethodConfig.from_dict(m) for m in cfg.methods]
    if cfg.omega_sq is not None:
        methods = [MethodConfig(**{**m.to_dict(), "omega_sq": m.omega_sq or cfg.omega_sq,
                                   "cv_grid": m.cv_grid}) for m in methods]
    if cfg.cv_grid is not None:
        methods = [MethodConfig(**{**m.to_dict(), "cv_grid": m.cv_grid or tuple(cfg.cv_grid)})
                   for m in methods]
    summary = {"config": cfg.to_dict()}
    try:
        result = run_replications(spec, methods, cfg.replicates, cfg.k_max,
                                  tuple(cfg.checkpoints), workers=workers)
    except ConvergenceError as err:
        summary["error"] = str(err)
        _write_json(out / "summary.json", summary)
        return EXIT_NONCONVERGED
    _write_csv(out / "replicates.csv", ["replicate", "method", "k", "regret"], result.rows())
    table = cumulative_frequency(result, cfg.boundaries)
    summary["results"] = result.summary()
    summary["cumulative_frequency"] = {
        "boundaries": [float(b) for b in cfg.boundaries],
        "counts": [{"method": key, "k": k, "counts": c} for (key, k), c in table.items()],
    }
    summary["tuned_omega_sq"] = {key: _floats(v) for key, v in result.tuned_omega_sq.items()}
    _write_json(out / "summary.json", summary)
    for row in result.summary():
        log.info("%-10s k=%-4s mean=%.4f sd=%s", row["method"], row["k"], row["mean"], row["sd"])
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig, out: Path) -> int:
    spec = cfg.scenario_spec()
    params = AggregationParams.flat(spec.m, cfg.nu, cfg.omega_sq, Entropy.KL)
    summary = {"config": cfg.to_dict()}
    try:
        report = check_oracle_inequality(spec, params, cfg.replicates, cfg.delta)
    except ConvergenceError as err:
        summary["error"] = str(err)
        _write_json(out / "summary.json", summary)
        return EXIT_NONCONVERGED
    _write_csv(out / "oracle.csv", ["replicate", "lhs", "rhs_deviation", "rhs_expectation"],
               ((r, report.lhs[r], report.rhs_deviation[r], report.rhs_expectation[r])
                for r in range(report.lhs.size)))
    summary["report"] = report.as_dict()
    _write_json(out / "summary.json", summary)
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK if report.passed else EXIT_ORACLE


# --- argument parsing ------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or an earlier summary.json")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--input", help="CSV with columns y[,truth],f1..fM")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in scenario")
    common.add_argument("--seed", type=int)
    common.add_argument("--nu", type=float)
    common.add_argument("--omega-sq", dest="omega_sq", type=float)
    common.add_argument("--entropy", choices=[e.value for e in Entropy])
    common.add_argument("--log-level", default="INFO")

    single = argparse.ArgumentParser(add_help=False)
    single.add_argument("--replicate", type=int, help="scenario replicate to solve (default 0)")
    single.add_argument("--prior", help="CSV with a single 'prior' column")
    single.add_argument("--cv-grid", dest="cv_grid", help="comma-separated omega^2 values to tune over")
    single.add_argument("--cv-folds", dest="cv_folds", type=int)
    single.add_argument("--exact-method", dest="exact_method", choices=[m.value for m in ExactMethod])

    parser = argparse.ArgumentParser(prog="bmax", description="BMAX model averaging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common, single], help="run one estimator")
    p.add_argument("--method", choices=SOLVE_METHODS)
    p.add_argument("--k", type=int, help="greedy iterations (default 150)")

    p = sub.add_parser("duality-check", parents=[common, single], help="saddle point and duality gap")
    p.add_argument("--tolerance", type=float, help="default 1e-6")

    p = sub.add_parser("experiment", parents=[common], help="replication study")
    p.add_argument("--replicates", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--checkpoints", help="comma-separated greedy checkpoints")
    p.add_argument("--cv-grid", dest="cv_grid")
    p.add_argument("--workers", type=int, help="default: $BMAX_WORKERS or 1")

    p = sub.add_parser("oracle-check", parents=[common], help="Monte-Carlo oracle inequality check")
    p.add_argument("--replicates", type=int)
    p.add_argument("--delta", type=float)
    return parser


def _workers(args) -> int:
    if getattr(args, "workers", None) is not None:
        value = args.workers
    else:
        env = os.environ.get("BMAX_WORKERS", "1")
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"BMAX_WORKERS={env!r} is not an integer") from None
    if value < 1:
        raise ConfigError("workers must be at least 1")
    return value


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args)
        out = _prepare_out(cfg.out)
        if cfg.command == "solve":
            return cmd_solve(cfg, out)
        if cfg.command == "duality-check":
            return cmd_duality_check(cfg, out)
        if cfg.command == "experiment":
            return cmd_experiment(cfg, out, _workers(args))
        return cmd_oracle_check(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
