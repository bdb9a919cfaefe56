"""Synthetic scenarios, cross-validated tuning of omega, and the replication harness.

Randomness comes from Philox streams keyed by ``(seed, replicate, stream)``, so
each replicate can be generated independently of every other one and the
results do not depend on how replicates are spread over workers.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import (
    AggregationParams,
    DataError,
    Dictionary,
    Entropy,
    Observation,
    SimplexWeights,
    mse,
    oracle_index,
    regret,
)
from .solvers import (
    ExactMethod,
    ExactSolveOptions,
    gma_0,
    gma_bmax,
    solve_bmax_exact,
    solve_ewma,
    solve_proj,
    solve_star,
)

log = logging.getLogger(__name__)

# stream ids inside one replicate
THETA, ZETA, DELTA, NOISE, CV = range(5)

CHECKPOINTS = (1, 5, 15, 60, 100, 150)
EXP1_BOUNDARIES = (0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.1)
EXP2_BOUNDARIES = (0.0, 0.031, 0.063, 0.094, 0.126, 0.157, 0.189, 0.220)

# Newton is used wherever the harness needs psi* many times; it reaches the
# same minimizer as the default fixed-point iteration in a handful of steps.
HARNESS_EXACT = ExactSolveOptions(grad_tolerance=1e-10, max_iterations=500, method=ExactMethod.NEWTON)

SIGMA_OVER_ZETA_NORM = "sigma_over_zeta_norm"


class TruthKind(enum.Enum):
    THETA_PLUS_DELTA = "theta_plus_delta"
    F1_PLUS_DELTA = "f1_plus_delta"


class CVMethod(enum.Enum):
    EWMA = "ewma"
    GMA_BMAX = "gma-bmax"


def stream_rng(seed: int, replicate: int, stream: int) -> np.random.Generator:
    """Independent Philox generator for one (seed, replicate, stream) key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replicate), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ScenarioSpec:
    n: int = 50
    m: int = 500
    m1: int = 50
    s: float | str = 1.0
    sigma: float = 2.0
    misspec_scale: float = 0.5
    truth_kind: TruthKind = TruthKind.F1_PLUS_DELTA
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "truth_kind", TruthKind(self.truth_kind))
        if self.n < 1 or self.m < 1:
            raise DataError("n and m must be positive")
        if not 0 <= self.m1 <= self.m:
            raise DataError(f"m1 must lie in [0, m], got {self.m1}")
        if isinstance(self.s, str):
            if self.s != SIGMA_OVER_ZETA_NORM:
                raise DataError(f"s must be a number or {SIGMA_OVER_ZETA_NORM!r}")
        elif not (math.isfinite(self.s) and self.s >= 0):
            raise DataError("s must be finite and nonnegative")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise DataError("sigma must be finite and nonnegative")
        if not (math.isfinite(self.misspec_scale) and self.misspec_scale >= 0):
            raise DataError("misspec_scale must be finite and nonnegative")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise DataError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["truth_kind"] = self.truth_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(**d)


EXP1 = ScenarioSpec(n=50, m=500, m1=50, s=1.0, sigma=2.0, misspec_scale=0.5,
                    truth_kind=TruthKind.F1_PLUS_DELTA)
EXP2 = ScenarioSpec(n=50, m=500, m1=500, s=SIGMA_OVER_ZETA_NORM, sigma=2.0, misspec_scale=0.5,
                    truth_kind=TruthKind.THETA_PLUS_DELTA)
PRESETS = {"exp1": EXP1, "exp2": EXP2}


def generate_scenario(spec: ScenarioSpec, replicate: int = 0) -> tuple[Dictionary, Observation]:
    n, m = spec.n, spec.m
    theta = stream_rng(spec.seed, replicate, THETA).standard_normal(n)
    zeta = stream_rng(spec.seed, replicate, ZETA).standard_normal((m, n))
    delta = stream_rng(spec.seed, replicate, DELTA).standard_normal(n)
    xi = spec.sigma * stream_rng(spec.seed, replicate, NOISE).standard_normal(n)

    F = zeta.copy()
    if spec.m1 > 0:
        if spec.s == SIGMA_OVER_ZETA_NORM:
            z = zeta[: spec.m1]
            scale = spec.sigma / np.sqrt(np.einsum("ij,ij->i", z, z))
            F[: spec.m1] = theta + scale[:, None] * z
        else:
            F[: spec.m1] = theta + spec.s * zeta[: spec.m1]
    if spec.truth_kind is TruthKind.F1_PLUS_DELTA:
        truth = F[0] + spec.misspec_scale * delta
    else:
        truth = theta + spec.misspec_scale * delta
    return Dictionary(F), Observation(truth + xi, truth)


def default_cv_grid(sigma: float, points: int = 12) -> tuple[float, ...]:
    """Log-spaced omega^2 grid from 0.5 sigma^2 to 50 sigma^2."""
    s2 = sigma * sigma if sigma > 0 else 1.0
    return tuple(float(v) for v in np.geomspace(0.5 * s2, 50.0 * s2, points))


def _fit_weights(method: CVMethod, dictionary: Dictionary, obs: Observation,
                 params: AggregationParams, k_max: int | None, init=None):
    if method is CVMethod.EWMA:
        return solve_ewma(dictionary, obs, params)[1].w, None
    if k_max is None:
        psi, trace = solve_bmax_exact(dictionary, obs, params, HARNESS_EXACT, init=init)
        return trace.final_weights.w, psi
    _, trace = gma_bmax(dictionary, obs, params, k_max)
    return trace.final_weights.w, None


def cv_scores(dictionary: Dictionary, obs: Observation, params_base: AggregationParams,
              grid, folds: int = 10, method: CVMethod | str = CVMethod.EWMA,
              rng: np.random.Generator | int = 0, k_max: int | None = None) -> np.ndarray:
    """Mean held-out squared error for every omega^2 in ``grid``.

    Design points are shuffled, cut into ``folds`` contiguous blocks, and each
    block is predicted by the aggregate fitted on the remaining points.
    For GMA_BMAX, ``k_max=None`` fits the converged BMAX estimate (the limit of
    the greedy iterates); an integer runs that many greedy steps instead.
    """
    method = CVMethod(method)
    grid = [float(g) for g in grid]
    if not grid:
        raise DataError("omega grid is empty")
    if folds < 2:
        raise DataError("need at least 2 folds")
    n = dictionary.n
    if n < folds:
        raise DataError(f"n={n} is smaller than the number of folds ({folds})")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    blocks = np.array_split(rng.permutation(n), folds)
    F, y = dictionary.candidates, obs.y
    scores = np.zeros(len(grid))
    for b in blocks:
        train = np.setdiff1d(np.arange(n), b)
        d_tr, o_tr = dictionary.restrict(train), obs.restrict(train)
        warm = None
        for g_idx, w2 in enumerate(grid):
            params = params_base.replace(omega_sq=w2)
            lam, warm = _fit_weights(method, d_tr, o_tr, params, k_max, init=warm)
            resid = lam @ F[:, b] - y[b]
            scores[g_idx] += float(resid @ resid) / b.size
    return scores / folds


def cross_validate_omega(dictionary: Dictionary, obs: Observation, params_base: AggregationParams,
                         grid, folds: int = 10, method: CVMethod | str = CVMethod.EWMA,
                         rng: np.random.Generator | int = 0, k_max: int | None = None) -> float:
    """omega^2 from ``grid`` with the lowest CV error; ties go to the smallest value."""
    scores = cv_scores(dictionary, obs, params_base, grid, folds, method, rng, k_max)
    grid = [float(g) for g in grid]
    best = min(range(len(grid)), key=lambda i: (scores[i], grid[i]))
    return grid[best]


METHOD_NAMES = ("oracle", "star", "ewma", "proj", "gma-bmax", "gma-0", "bmax-exact")
GREEDY = ("gma-bmax", "gma-0")


@dataclass(frozen=True)
class MethodConfig:
    """One estimator in a replication run.

    ``omega_sq=None`` means omega^2 is tuned per replicate by cross-validation
    (only for methods where it matters). ``k_max=None`` inherits the run-level
    iteration count (PROJ defaults to 200 steps).
    """

    name: str
    nu: float = 0.5
    omega_sq: float | None = None
    k_max: int | None = None
    cv_folds: int = 10
    cv_grid: tuple[float, ...] | None = None
    cv_k_max: int | None = None
    label: str | None = None

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise DataError(f"unknown method {self.name!r}; choose from {METHOD_NAMES}")
        if self.cv_grid is not None:
            object.__setattr__(self, "cv_grid", tuple(float(v) for v in self.cv_grid))

    @property
    def key(self) -> str:
        return self.label or self.name

    @property
    def tuned(self) -> bool:
        return self.omega_sq is None and self.name in ("ewma", "gma-bmax", "bmax-exact")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["cv_grid"] is not None:
            d["cv_grid"] = list(d["cv_grid"])
        return d

    @classmethod
    def from_dict(cls, d: dict | str) -> "MethodConfig":
        if isinstance(d, str):
            return cls(d)
        d = dict(d)
        if d.get("cv_grid") is not None:
            d["cv_grid"] = tuple(d["cv_grid"])
        return cls(**d)


PAPER_METHODS = (
    MethodConfig("star"),
    MethodConfig("ewma"),
    MethodConfig("proj"),
    MethodConfig("gma-bmax"),
    MethodConfig("gma-0"),
)


@dataclass
class ReplicationResult:
    """Per-replicate regrets keyed by ``(method key, k)``; k is None for non-greedy methods."""

    regrets: dict[tuple[str, int | None], np.ndarray]
    replicates: int
    tuned_omega_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def keys(self):
        return list(self.regrets)

    def mean(self, key: str, k: int | None = None) -> float:
        return float(np.mean(self.regrets[(key, k)]))

    def sd(self, key: str, k: int | None = None) -> float:
        r = self.regrets[(key, k)]
        return float(np.std(r, ddof=1)) if r.size > 1 else float("nan")

    def rows(self):
        """(replicate, method, k, regret) in replicate-major order."""
        for r in range(self.replicates):
            for (key, k), vals in self.regrets.items():
                yield r, key, k, float(vals[r])

    def summary(self) -> list[dict]:
        out = []
        for (key, k), vals in self.regrets.items():
            sd = self.sd(key, k)
            out.append({"method": key, "k": k, "mean": self.mean(key, k),
                        "sd": None if math.isnan(sd) else sd, "count": int(vals.size)})
        return out


def _method_params(cfg: MethodConfig, m: int, omega_sq: float, entropy: Entropy) -> AggregationParams:
    return AggregationParams(cfg.nu, omega_sq, SimplexWeights.flat(m), entropy)


def _evaluate_method(cfg: MethodConfig, dictionary: Dictionary, obs: Observation,
                     spec: ScenarioSpec, replicate: int, k_max: int, checkpoints):
    """Return ({k: estimate}, tuned omega^2 or None) for one method on one replicate."""
    m = dictionary.M
    name = cfg.name
    if name == "oracle":
        return {None: dictionary.candidates[oracle_index(dictionary, obs.truth)]}, None
    if name == "star":
        return {None: solve_star(dictionary, obs)[0]}, None
    if name == "proj":
        return {None: solve_proj(dictionary, obs, cfg.k_max or 200)[1]}, None
    steps = cfg.k_max or k_max
    if name == "gma-0":
        params = _method_params(cfg, m, cfg.omega_sq or 1.0, Entropy.LINEAR)
        wanted = sorted({c for c in checkpoints if c <= steps} | {steps})
        _, est, trace = gma_0(dictionary, obs, params, steps, wanted)
        return {k: trace.snapshots[k] for k in wanted}, None
    omega_sq = cfg.omega_sq
    if omega_sq is None:
        grid = cfg.cv_grid or default_cv_grid(spec.sigma)
        base = _method_params(cfg, m, 1.0, Entropy.KL)
        cv_method = CVMethod.EWMA if name == "ewma" else CVMethod.GMA_BMAX
        # CV shuffle stream is per method so that adding a method leaves others unchanged
        cv_rng = stream_rng(spec.seed, replicate, CV + 1 + METHOD_NAMES.index(name))
        omega_sq = cross_validate_omega(dictionary, obs, base, grid, cfg.cv_folds,
                                        cv_method, cv_rng, cfg.cv_k_max)
    params = _method_params(cfg, m, omega_sq, Entropy.KL)
    if name == "ewma":
        return {None: solve_ewma(dictionary, obs, params)[0]}, omega_sq
    if name == "bmax-exact":
        return {None: solve_bmax_exact(dictionary, obs, params, HARNESS_EXACT)[0]}, omega_sq
    wanted = sorted({c for c in checkpoints if c <= steps} | {steps})
    _, trace = gma_bmax(dictionary, obs, params, steps, wanted)
    return {k: trace.snapshots[k] for k in wanted}, omega_sq


def run_replicate(spec: ScenarioSpec, methods, replicate: int, k_max: int = 150,
                  checkpoints=CHECKPOINTS):
    """Regrets of every method on one replicate: ([(key, k, regret)], {key: omega^2})."""
    dictionary, obs = generate_scenario(spec, replicate)
    rows, tuned = [], {}
    for cfg in methods:
        estimates, w2 = _evaluate_method(cfg, dictionary, obs, spec, replicate, k_max, checkpoints)
        greedy = cfg.name in GREEDY
        for k, est in estimates.items():
            rows.append((cfg.key, k if greedy else None, regret(est, obs.truth, dictionary)))
        if w2 is not None:
            tuned[cfg.key] = w2
    return rows, tuned


def _run_replicate_args(args):
    return run_replicate(*args)


def run_replications(spec: ScenarioSpec, methods, replicates: int, k_max: int = 150,
                     checkpoints=CHECKPOINTS, workers: int = 1) -> ReplicationResult:
    """Run every method on ``replicates`` independent draws of the scenario.

    Replicate ``r`` only reads streams keyed by ``r``; results are collected
    in replicate order, so the output does not depend on ``workers``.
    """
    if replicates < 1:
        raise DataError("replicates must be at least 1")
    methods = [m if isinstance(m, MethodConfig) else MethodConfig.from_dict(m) for m in methods]
    keys = [m.key for m in methods]
    if len(set(keys)) != len(keys):
        raise DataError("method keys must be unique; set distinct labels")
    jobs = [(spec, methods, r, k_max, tuple(checkpoints)) for r in range(replicates)]
    if workers > 1 and replicates > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_replicate_args, jobs, chunksize=1))
    else:
        outputs = []
        for job in jobs:
            outputs.append(_run_replicate_args(job))
            if len(outputs) % 10 == 0:
                log.info("replicate %d/%d done", len(outputs), replicates)
    columns: dict[tuple[str, int | None], list[float]] = {}
    tuned: dict[str, list[float]] = {}
    for rows, w2 in outputs:
        for key, k, val in rows:
            columns.setdefault((key, k), []).append(val)
        for key, v in w2.items():
            tuned.setdefault(key, []).append(v)
    return ReplicationResult(
        regrets={key: np.array(v) for key, v in columns.items()},
        replicates=replicates,
        tuned_omega_sq={key: np.array(v) for key, v in tuned.items()},
    )


def cumulative_frequency(result: ReplicationResult, boundaries, keys=None) -> dict:
    """Replicates with regret <= each boundary, per (method, k) key."""
    bounds = np.asarray(boundaries, dtype=float)
    if bounds.ndim != 1 or np.any(np.diff(bounds) < 0):
        raise DataError("boundaries must be sorted ascending")
    keys = result.keys() if keys is None else keys
    return {key: [int(np.sum(result.regrets[key] <= b)) for b in bounds] for key in keys}


@dataclass
class OracleReport:
    """Monte-Carlo check of the single-model deviation and expectation bounds for psi*."""

    lhs: np.ndarray
    rhs_deviation: np.ndarray
    rhs_expectation: np.ndarray
    delta: float
    frequency: float
    threshold: float
    passed: bool
    expectation_holds: bool

    def as_dict(self) -> dict:
        return {
            "replicates": int(self.lhs.size),
            "delta": self.delta,
            "frequency": self.frequency,
            "threshold": self.threshold,
            "passed": self.passed,
            "mean_lhs": float(np.mean(self.lhs)),
            "mean_rhs_expectation": float(np.mean(self.rhs_expectation)),
            "expectation_holds": self.expectation_holds,
        }


def check_oracle_inequality(spec: ScenarioSpec, params: AggregationParams, replicates: int,
                            delta: float) -> OracleReport:
    """Frequency with which ||psi* - eta||^2 <= min_j {||f_j - eta||^2 + 2 omega^2 log(1/(pi_j delta))}.

    Passes when the frequency is at least ``1 - delta - 2 sqrt(delta (1 - delta) / replicates)``.
    The expectation side compares the mean of the left side against the mean
    of ``min_j {||f_j - eta||^2 + 2 omega^2 log(1/pi_j)}``.
    """
    if not 0 < delta < 1:
        raise DataError("delta must lie in (0, 1)")
    if replicates < 1:
        raise DataError("replicates must be at least 1")
    nu = params.nu
    if not 0 < nu < 1:
        raise DataError("nu must lie in (0, 1)")
    need = spec.sigma ** 2 / min(nu, 1 - nu)
    if params.omega_sq < need * (1 - 1e-12):
        raise DataError(f"omega^2 = {params.omega_sq:g} is below sigma^2/min(nu, 1-nu) = {need:g}")
    if len(params.prior) != spec.m:
        raise DataError("prior length does not match the scenario")
    params = params.replace(entropy=Entropy.KL)
    lhs = np.empty(replicates)
    rhs_dev = np.empty(replicates)
    rhs_exp = np.empty(replicates)
    penalty = 2.0 * params.omega_sq * -params.log_prior
    for r in range(replicates):
        dictionary, obs = generate_scenario(spec, r)
        psi, _ = solve_bmax_exact(dictionary, obs, params, HARNESS_EXACT)
        n = dictionary.n
        lhs[r] = n * mse(psi, obs.truth)
        dist = n * np.array([mse(f, obs.truth) for f in dictionary.candidates])
        rhs_dev[r] = np.min(dist + penalty + 2.0 * params.omega_sq * math.log(1.0 / delta))
        rhs_exp[r] = np.min(dist + penalty)
    freq = float(np.mean(lhs <= rhs_dev))
    threshold = 1.0 - delta - 2.0 * math.sqrt(delta * (1.0 - delta) / replicates)
    return OracleReport(lhs, rhs_dev, rhs_exp, delta, freq, threshold,
                        passed=freq >= threshold,
                        expectation_holds=bool(np.mean(lhs) <= np.mean(rhs_exp)))


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return replace(spec, seed=seed)
