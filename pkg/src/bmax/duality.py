"""Saddle point of S(lambda, h): the A/B hypersurface maps and duality-gap reports."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    AggregationParams,
    DataError,
    Dictionary,
    Observation,
    SimplexWeights,
    _as_vector,
    _weights,
)
from .objectives import _require_kl, q_objective, softmax, sq_dists, t_objective
from .solvers import ExactSolveOptions, solve_bmax_exact

SMALL_NU = 1e-3


@dataclass(frozen=True, eq=False)
class SaddleReport:
    lambda_hat: SimplexWeights
    h_hat: np.ndarray
    psi_star: np.ndarray
    q_value: float
    t_value: float
    gap: float
    a_residual: float
    b_residual: float

    def within(self, tolerance: float, relative_gap: bool = True) -> bool:
        gap_tol = tolerance * (1.0 + abs(self.t_value)) if relative_gap else tolerance
        return (self.gap <= gap_tol and self.a_residual <= tolerance
                and self.b_residual <= tolerance)

    def as_dict(self) -> dict:
        return {
            "lambda_hat": [float(v) for v in self.lambda_hat.w],
            "h_hat": [float(v) for v in self.h_hat],
            "psi_star": [float(v) for v in self.psi_star],
            "q_value": self.q_value,
            "t_value": self.t_value,
            "gap": self.gap,
            "a_residual": self.a_residual,
            "b_residual": self.b_residual,
        }


def _check_nu(params: AggregationParams):
    if params.nu <= 0.0:
        raise DataError("the duality maps need nu in (0, 1)")
    if params.nu < SMALL_NU:
        warnings.warn(f"nu={params.nu:g} is small: the A-map amplifies errors by (1-nu)/nu",
                      RuntimeWarning, stacklevel=3)


def h_from_lambda(lam, obs: Observation, params: AggregationParams,
                  dictionary: Dictionary | None = None) -> np.ndarray:
    """Hypersurface A: ``h = Y/nu - ((1-nu)/nu) f_lambda``.

    ``lam`` may be the weights (then ``dictionary`` is needed) or directly the
    aggregate vector f_lambda.
    """
    _check_nu(params)
    if dictionary is not None:
        f_lam = _weights(lam) @ dictionary.candidates
    else:
        f_lam = _as_vector(lam, "f_lambda", obs.n)
    nu = params.nu
    return obs.y / nu - ((1.0 - nu) / nu) * f_lam


def lambda_from_h(h, dictionary: Dictionary, params: AggregationParams) -> SimplexWeights:
    """Hypersurface B: ``lambda_j ~ pi_j exp(-nu ||f_j - h||^2 / (2 omega^2))``."""
    _require_kl(params, "the B-map")
    h = _as_vector(h, "h", dictionary.n)
    z = params.log_prior - params.nu * sq_dists(dictionary.candidates, h) / (2.0 * params.omega_sq)
    return SimplexWeights(softmax(z))


def total_variation(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(_weights(p) - _weights(q))))


def saddle_report(lam, h, dictionary: Dictionary, obs: Observation,
                  params: AggregationParams, psi=None) -> SaddleReport:
    """Gap and hypersurface residuals of an arbitrary pair (lambda, h).

    ``a_residual`` is the distance from h to the A-image of lambda,
    ``b_residual`` the total-variation distance from lambda to the B-image of h.
    """
    _require_kl(params, "T")
    _check_nu(params)
    lam = lam if isinstance(lam, SimplexWeights) else SimplexWeights(lam)
    h = _as_vector(h, "h", dictionary.n)
    f_lam = lam.w @ dictionary.candidates
    q = q_objective(lam, dictionary, obs, params)
    t = t_objective(h, dictionary, obs, params)
    return SaddleReport(
        lambda_hat=lam,
        h_hat=h,
        psi_star=f_lam if psi is None else _as_vector(psi, "psi", dictionary.n),
        q_value=q,
        t_value=t,
        gap=q - t,
        a_residual=float(np.linalg.norm(h - h_from_lambda(f_lam, obs, params))),
        b_residual=total_variation(lam, lambda_from_h(h, dictionary, params)),
    )


def saddle_from_psi(psi, dictionary: Dictionary, obs: Observation,
                    params: AggregationParams) -> SaddleReport:
    """Dual pair of a primal point: h is the A-image of psi, lambda the B-image of h."""
    psi = _as_vector(psi, "psi", dictionary.n)
    h_hat = h_from_lambda(psi, obs, params)
    lam = lambda_from_h(h_hat, dictionary, params)
    return saddle_report(lam, h_hat, dictionary, obs, params, psi=psi)


def solve_saddle(dictionary: Dictionary, obs: Observation, params: AggregationParams,
                 tolerance: float = 1e-8, opts: ExactSolveOptions | None = None,
                 init=None) -> SaddleReport:
    """Saddle pair built from the exact BMAX minimizer.

    ``h_hat`` is the A-image of psi*, ``lambda_hat`` its B-image. Exact-solver
    non-convergence propagates as ConvergenceError. ``tolerance`` is carried
    into the solver's gradient tolerance when no options are given.
    """
    _require_kl(params, "T")
    _check_nu(params)
    if opts is None:
        opts = ExactSolveOptions(grad_tolerance=min(1e-10, tolerance))
    psi, _ = solve_bmax_exact(dictionary, obs, params, opts, init=init)
    return saddle_from_psi(psi, dictionary, obs, params)
