"""Estimators: exact BMAX, the two greedy averaging schemes, EWMA, STAR and PROJ.

Greedy argmin scans are full O(M) scans with ties going to the smallest
candidate index (``np.argmin`` semantics), so traces are reproducible.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AggregationParams,
    DataError,
    Dictionary,
    Entropy,
    Observation,
    SimplexWeights,
    _as_vector,
)
from .objectives import EntropyError, Evaluator, logsumexp, softmax, sq_dists

STAR_CLAMP = 1e-12


@dataclass(frozen=True)
class IterationRecord:
    k: int
    index: int | None
    alpha: float | None
    objective: float


@dataclass
class SolveTrace:
    iterations: list[IterationRecord] = field(default_factory=list)
    final_objective: float = float("nan")
    final_weights: SimplexWeights | None = None
    # iterate (and weights, when tracked) at requested checkpoint steps
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    snapshot_weights: dict[int, np.ndarray] = field(default_factory=dict)
    converged: bool = True
    grad_norm: float | None = None

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.iterations])

    @property
    def indices(self) -> list[int | None]:
        return [r.index for r in self.iterations]


class ExactMethod(enum.Enum):
    FIXED_POINT = "fixed-point"
    GRADIENT_DESCENT = "gradient-descent"
    NEWTON = "newton"


@dataclass(frozen=True)
class ExactSolveOptions:
    grad_tolerance: float = 1e-10
    max_iterations: int = 100_000
    method: ExactMethod = ExactMethod.FIXED_POINT

    def __post_init__(self):
        if not self.grad_tolerance > 0:
            raise DataError("grad_tolerance must be positive")
        if self.max_iterations < 1:
            raise DataError("max_iterations must be at least 1")
        object.__setattr__(self, "method", ExactMethod(self.method))


class ConvergenceError(RuntimeError):
    """The exact solver hit its iteration cap; the best iterate is attached."""

    def __init__(self, message: str, psi: np.ndarray, trace: SolveTrace):
        super().__init__(message)
        self.psi = psi
        self.trace = trace
        self.grad_norm = trace.grad_norm


def _backtrack(ev: Evaluator, psi, direction, value, step, slack):
    # halve until log J does not increase (up to rounding slack)
    while step > 1e-30:
        cand = psi + step * direction
        cval = ev.log_j(cand)
        if cval <= value + slack:
            return cand, cval
        step *= 0.5
    return psi, value


def solve_bmax_exact(dictionary: Dictionary, obs: Observation, params: AggregationParams,
                     opts: ExactSolveOptions | None = None,
                     init=None) -> tuple[np.ndarray, SolveTrace]:
    """Minimize log J over R^n.

    FIXED_POINT iterates ``psi <- psi + t (f_{lambda(psi)} - psi)``, i.e. a
    gradient step of length t/A1. It starts undamped (t = 1, the plain
    stationarity map) and halves t whenever a step raises log J or the gradient
    norm; t never drops below A1/A2, where the step equals the always-convergent
    1/A2 gradient step. GRADIENT_DESCENT takes constant steps 1/A2. NEWTON
    uses the closed-form Hessian ``A1 I + A1^2 Cov_lambda(f)`` with backtracking.

    Raises ConvergenceError when the gradient norm is still above tolerance
    after ``max_iterations`` steps.
    """
    opts = opts or ExactSolveOptions()
    ev = Evaluator(dictionary, obs, params)
    a1, a2 = ev.curv.a1, ev.curv.a2
    psi = np.zeros(dictionary.n) if init is None else _as_vector(init, "init", dictionary.n).copy()
    trace = SolveTrace()
    method = opts.method
    damping, min_damping = 1.0, a1 / a2
    val, g, lam = ev.value_and_grad(psi)
    gnorm = float(np.linalg.norm(g))
    for it in range(1, opts.max_iterations + 1):
        if gnorm <= opts.grad_tolerance:
            break
        if method is ExactMethod.NEWTON:
            d = np.linalg.solve(ev.hessian(psi), g)
            slack = 1e-13 * max(1.0, abs(val))
            psi, _ = _backtrack(ev, psi, -d, val, 1.0, slack)
        elif method is ExactMethod.GRADIENT_DESCENT:
            psi = psi - g / a2
        else:
            while True:
                cand = psi - (damping / a1) * g
                cval, cg, clam = ev.value_and_grad(cand)
                cnorm = float(np.linalg.norm(cg))
                if (cval <= val and cnorm <= gnorm) or damping <= min_damping:
                    break
                damping = max(0.5 * damping, min_damping)
            psi = cand
        val, g, lam = ev.value_and_grad(psi)
        gnorm = float(np.linalg.norm(g))
        trace.iterations.append(IterationRecord(it, None, None, val))
    trace.final_objective = val
    trace.final_weights = SimplexWeights(lam)
    trace.grad_norm = gnorm
    if gnorm <= opts.grad_tolerance:
        return psi, trace
    trace.converged = False
    raise ConvergenceError(
        f"{method.value} did not reach |grad| <= {opts.grad_tolerance:g} in "
        f"{opts.max_iterations} iterations (|grad| = {gnorm:.3e})", psi, trace)


def _first_copy(F: np.ndarray) -> np.ndarray:
    """Map each row to the index of its first identical row.

    Identical candidates can get scores that differ in the last bit (BLAS
    blocking), so greedy picks are canonicalized to keep smallest-index ties.
    """
    _, first, inverse = np.unique(F, axis=0, return_index=True, return_inverse=True)
    return first[inverse.reshape(-1)]


def _step_size(k: int) -> float:
    return 2.0 / (k + 1)


class _GreedyBMAX:
    """Vectorized evaluation of log J at all greedy candidates.

    With psi'_j = (1 - a) psi + a f_j,
    ``||psi'_j - f_i||^2 = ||psi'_j||^2 - 2(1-a)<psi, f_i> - 2a G_ji + ||f_i||^2``,
    so one step costs an M x M pass over the Gram matrix G. Each row of G is
    pre-shifted by its minimum, which together with the max of the column term
    bounds every exponent by zero and replaces the per-row max pass.
    """

    def __init__(self, ev: Evaluator):
        self.ev = ev
        F = ev.F
        G = F @ F.T
        self.G = G
        self.sqn = np.diag(G).copy()
        self.row_min = G.min(axis=1)
        self.G_shift = G - self.row_min[:, None]
        self.scale = ev.scale
        self._buf = np.empty_like(G)

    def candidate_values(self, psi: np.ndarray, alpha: float) -> np.ndarray:
        F, sqn, s = self.ev.F, self.sqn, self.scale
        pf = F @ psi
        b = 1.0 - alpha
        coef = -2.0 * alpha * s
        nrm = b * b * (psi @ psi) + 2.0 * alpha * b * pf + alpha * alpha * sqn
        col = self.ev.base + s * (sqn - 2.0 * b * pf)
        cmax = col.max()
        buf = self._buf
        np.multiply(self.G_shift, coef, out=buf)
        np.add(buf, col - cmax, out=buf)
        np.exp(buf, out=buf)
        sums = buf.sum(axis=1)
        lse = np.empty_like(sums)
        ok = sums > 1e-250
        lse[ok] = np.log(sums[ok]) + cmax + coef * self.row_min[ok]
        if not ok.all():
            bad = ~ok
            lse[bad] = logsumexp(coef * self.G[bad] + col, axis=1)
        return s * nrm + lse


def gma_bmax(dictionary: Dictionary, obs: Observation, params: AggregationParams,
             k_max: int, checkpoints=()) -> tuple[np.ndarray, SolveTrace]:
    """Greedy minimization of log J with steps 2/(k+1), starting from psi = 0."""
    if k_max < 1:
        raise DataError("k_max must be at least 1")
    ev = Evaluator(dictionary, obs, params)
    greedy = _GreedyBMAX(ev)
    F = ev.F
    canon = _first_copy(F)
    psi = np.zeros(dictionary.n)
    lam = np.zeros(dictionary.M)
    checkpoints = set(checkpoints)
    trace = SolveTrace()
    for k in range(1, k_max + 1):
        alpha = _step_size(k)
        j = int(canon[np.argmin(greedy.candidate_values(psi, alpha))])
        psi = (1.0 - alpha) * psi + alpha * F[j]
        lam *= 1.0 - alpha
        lam[j] += alpha
        trace.iterations.append(IterationRecord(k, j, alpha, ev.log_j(psi)))
        if k in checkpoints:
            trace.snapshots[k] = psi.copy()
            trace.snapshot_weights[k] = lam.copy()
    trace.final_objective = trace.iterations[-1].objective
    trace.final_weights = SimplexWeights(lam)
    return psi, trace


def _is_flat(prior: SimplexWeights) -> bool:
    return bool(np.ptp(prior.w) == 0.0)


def gma0_full_scores(F, y, lam, params: AggregationParams, alpha: float,
                     sqn=None) -> np.ndarray:
    """Q at every candidate lambda + alpha (e_j - lambda), linear entropy."""
    sqn = np.einsum("ij,ij->i", F, F) if sqn is None else sqn
    b = 1.0 - alpha
    g = lam @ F
    gf = F @ g
    fy = F @ y
    gg = g @ g
    nrm = b * b * gg + 2.0 * alpha * b * gf + alpha * alpha * sqn
    fit = nrm - 2.0 * b * (g @ y) - 2.0 * alpha * fy + y @ y
    var = b * (lam @ sqn) + alpha * sqn - nrm
    neglogp = -params.log_prior
    ent = b * (lam @ neglogp) + alpha * neglogp
    return fit + params.nu * var + 2.0 * params.omega_sq * ent


def gma0_simplified_scores(F, y, lam, nu: float, alpha: float) -> np.ndarray:
    """Flat-prior selection score ||f_j - Y||^2 - (1-nu)(1-alpha)||f_lam - f_j||^2."""
    g = lam @ F
    return sq_dists(F, y) - (1.0 - nu) * (1.0 - alpha) * sq_dists(F, g)


def gma_0(dictionary: Dictionary, obs: Observation, params: AggregationParams,
          k_max: int, checkpoints=(), rule: str = "auto"
          ) -> tuple[SimplexWeights, np.ndarray, SolveTrace]:
    """Greedy minimization of the linear-entropy Q over the simplex.

    ``rule`` picks the selection score: "full" evaluates Q at every candidate,
    "simplified" uses the flat-prior shortcut, "auto" uses the shortcut iff the
    prior is flat. lambda starts at 0; since alpha_1 = 1 it lands on a vertex
    after the first step.
    """
    if params.entropy is not Entropy.LINEAR:
        raise EntropyError("GMA-0 works with the linear entropy only")
    if k_max < 1:
        raise DataError("k_max must be at least 1")
    if obs.n != dictionary.n or len(params.prior) != dictionary.M:
        raise DataError("dimension mismatch between dictionary, observation and prior")
    flat = _is_flat(params.prior)
    if rule == "auto":
        rule = "simplified" if flat else "full"
    if rule not in ("full", "simplified"):
        raise DataError(f"unknown selection rule {rule!r}")
    if rule == "simplified" and not flat:
        raise DataError("the simplified GMA-0 rule requires a flat prior")
    F, y = dictionary.candidates, obs.y
    sqn = np.einsum("ij,ij->i", F, F)
    canon = _first_copy(F)
    lam = np.zeros(dictionary.M)
    checkpoints = set(checkpoints)
    trace = SolveTrace()
    for k in range(1, k_max + 1):
        alpha = _step_size(k)
        full = gma0_full_scores(F, y, lam, params, alpha, sqn)
        if rule == "full":
            j = int(np.argmin(full))
        else:
            j = int(np.argmin(gma0_simplified_scores(F, y, lam, params.nu, alpha)))
        j = int(canon[j])
        lam *= 1.0 - alpha
        lam[j] += alpha
        trace.iterations.append(IterationRecord(k, j, alpha, float(full[j])))
        if k in checkpoints:
            trace.snapshots[k] = lam @ F
            trace.snapshot_weights[k] = lam.copy()
    weights = SimplexWeights(lam)
    trace.final_objective = trace.iterations[-1].objective
    trace.final_weights = weights
    return weights, weights.w @ F, trace


def solve_ewma(dictionary: Dictionary, obs: Observation,
               params: AggregationParams) -> tuple[np.ndarray, SimplexWeights]:
    if obs.n != dictionary.n or len(params.prior) != dictionary.M:
        raise DataError("dimension mismatch between dictionary, observation and prior")
    z = params.log_prior - sq_dists(dictionary.candidates, obs.y) / (2.0 * params.omega_sq)
    w = SimplexWeights(softmax(z))
    return w.w @ dictionary.candidates, w


def solve_star(dictionary: Dictionary, obs: Observation) -> tuple[np.ndarray, tuple[int, int, float]]:
    """Two-point STAR aggregate around the empirical risk minimizer.

    The mixing coefficient is restricted to the open interval (0, 1), realized
    as the clamp [1e-12, 1 - 1e-12].
    """
    if obs.n != dictionary.n:
        raise DataError("dimension mismatch between dictionary and observation")
    F, y = dictionary.candidates, obs.y
    k1 = int(np.argmin(sq_dists(F, y)))
    r = F[k1] - y
    D = F - F[k1]
    dd = np.einsum("ij,ij->i", D, D)
    rd = D @ r
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(dd > 0, -rd / dd, STAR_CLAMP)
    alpha = np.clip(alpha, STAR_CLAMP, 1.0 - STAR_CLAMP)
    q = r @ r + 2.0 * alpha * rd + alpha * alpha * dd
    k2 = int(np.argmin(q))
    a = float(alpha[k2])
    return (1.0 - a) * F[k1] + a * F[k2], (k1, k2, a)


def solve_proj(dictionary: Dictionary, obs: Observation,
               max_iter: int = 200) -> tuple[SimplexWeights, np.ndarray]:
    """Projection of Y onto the convex hull, approximated by GMA-0 at nu = 0."""
    params = AggregationParams.flat(dictionary.M, nu=0.0, omega_sq=1.0, entropy=Entropy.LINEAR)
    lam, est, _ = gma_0(dictionary, obs, params, max_iter)
    return lam, est
