"""Scalar objectives: log J and its gradient, Q, T, S, and the curvature constants.

Every exponential sum goes through a max-shifted log-sum-exp; at paper scale the
exponents ``||f_j - Y||^2 / (2 omega^2)`` run into the hundreds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AggregationParams,
    DataError,
    Dictionary,
    Entropy,
    Observation,
    SimplexWeights,
    _as_vector,
    _weights,
    rho_entropy,
)


class EntropyError(DataError):
    """An objective was requested under an entropy for which it is undefined."""


def logsumexp(z: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    z = np.asarray(z, dtype=float)
    m = np.max(z, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def sq_dists(F: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise squared distances ``||F[j] - x||^2``."""
    d = F - x
    return np.einsum("ij,ij->i", d, d)


@dataclass(frozen=True)
class CurvatureConstants:
    a1: float
    a2: float
    a3: float


def curvature(dictionary: Dictionary, params: AggregationParams) -> CurvatureConstants:
    a1 = (1.0 - params.nu) / params.omega_sq
    L2 = dictionary.l2_bound ** 2
    return CurvatureConstants(a1=a1, a2=a1 + a1 * a1 * L2, a3=a1 * L2 + a1 * a1 * L2 * L2)


class Evaluator:
    """Precomputed state for repeated evaluation of log J on one problem.

    Holds ``||f_j - Y||^2`` and the prior logs so that each call only pays for
    the distances from ``psi`` to the candidates.
    """

    def __init__(self, dictionary: Dictionary, obs: Observation, params: AggregationParams):
        if obs.n != dictionary.n:
            raise DataError(f"observation has n={obs.n}, dictionary has n={dictionary.n}")
        if len(params.prior) != dictionary.M:
            raise DataError(f"prior has {len(params.prior)} entries, dictionary has M={dictionary.M}")
        self.dictionary = dictionary
        self.obs = obs
        self.params = params
        self.F = dictionary.candidates
        self.y = obs.y
        self.dist_y = sq_dists(self.F, self.y)
        self.log_prior = params.log_prior
        self.scale = (1.0 - params.nu) / (2.0 * params.omega_sq)
        self.base = self.log_prior - self.dist_y / (2.0 * params.omega_sq)
        self.curv = curvature(dictionary, params)

    def _psi(self, psi) -> np.ndarray:
        return _as_vector(psi, "psi", self.dictionary.n)

    def exponents(self, psi) -> np.ndarray:
        return self.base + self.scale * sq_dists(self.F, self._psi(psi))

    def log_j(self, psi) -> float:
        val = logsumexp(self.exponents(psi))
        if not np.isfinite(val):
            raise FloatingPointError("log J overflowed")
        return val

    def posterior(self, psi) -> np.ndarray:
        return softmax(self.exponents(psi))

    def grad(self, psi) -> tuple[np.ndarray, np.ndarray]:
        psi = self._psi(psi)
        lam = self.posterior(psi)
        return self.curv.a1 * (psi - lam @ self.F), lam

    def value_and_grad(self, psi) -> tuple[float, np.ndarray, np.ndarray]:
        psi = self._psi(psi)
        z = self.exponents(psi)
        lam = softmax(z)
        return logsumexp(z), self.curv.a1 * (psi - lam @ self.F), lam

    def hessian(self, psi) -> np.ndarray:
        """``a1 I + a1^2 Cov_lambda(f)`` with lambda the posterior at psi."""
        lam = self.posterior(psi)
        centered = self.F - lam @ self.F
        a1 = self.curv.a1
        cov = (centered * lam[:, None]).T @ centered
        return a1 * np.eye(self.dictionary.n) + a1 * a1 * cov


def log_j(psi, dictionary: Dictionary, obs: Observation, params: AggregationParams) -> float:
    return Evaluator(dictionary, obs, params).log_j(psi)


def grad_log_j(psi, dictionary: Dictionary, obs: Observation,
               params: AggregationParams) -> tuple[np.ndarray, SimplexWeights]:
    """Gradient of log J and the posterior weights that define it."""
    g, lam = Evaluator(dictionary, obs, params).grad(psi)
    return g, SimplexWeights(lam)


def gibbs_min(x, a: float, prior) -> tuple[float, np.ndarray]:
    """Minimum over the simplex of ``-sum_j lam_j x_j + a K(lam, pi)`` and its minimizer.

    The value is ``-a log sum_j pi_j exp(x_j / a)``, attained at the Gibbs
    weights ``lam_j ~ pi_j exp(x_j / a)``.
    """
    if not a > 0:
        raise DataError("a must be positive")
    z = np.log(_weights(prior)) + np.asarray(x, dtype=float) / a
    return -a * logsumexp(z), softmax(z)


def _check_dims(dictionary: Dictionary, obs: Observation, params: AggregationParams):
    if obs.n != dictionary.n:
        raise DataError(f"observation has n={obs.n}, dictionary has n={dictionary.n}")
    if len(params.prior) != dictionary.M:
        raise DataError("prior length does not match the dictionary")


def q_objective(lam, dictionary: Dictionary, obs: Observation, params: AggregationParams) -> float:
    """Q(lambda) = ||f_lam - Y||^2 + nu sum_j lam_j ||f_j - f_lam||^2 + 2 omega^2 K_rho(lam, pi)."""
    _check_dims(dictionary, obs, params)
    w = _weights(lam)
    if w.shape != (dictionary.M,):
        raise DataError("weights do not match the dictionary")
    f_lam = w @ dictionary.candidates
    fit = f_lam - obs.y
    spread = w @ sq_dists(dictionary.candidates, f_lam)
    ent = rho_entropy(w, params.prior.w, params.entropy)
    return float(fit @ fit) + params.nu * float(spread) + 2.0 * params.omega_sq * ent


def _require_kl(params: AggregationParams, what: str):
    if params.entropy is not Entropy.KL:
        raise EntropyError(f"{what} is defined only for the KL entropy")


def t_objective(h, dictionary: Dictionary, obs: Observation, params: AggregationParams) -> float:
    _require_kl(params, "T")
    _check_dims(dictionary, obs, params)
    h = _as_vector(h, "h", dictionary.n)
    nu, w2 = params.nu, params.omega_sq
    r = h - obs.y
    inner, _ = gibbs_min(-nu * sq_dists(dictionary.candidates, h), 2.0 * w2, params.prior.w)
    return -(nu / (1.0 - nu)) * float(r @ r) + inner


def s_objective(lam, h, dictionary: Dictionary, obs: Observation, params: AggregationParams) -> float:
    _require_kl(params, "S")
    _check_dims(dictionary, obs, params)
    w = _weights(lam)
    h = _as_vector(h, "h", dictionary.n)
    nu = params.nu
    r = h - obs.y
    spread = w @ sq_dists(dictionary.candidates, h)
    ent = rho_entropy(w, params.prior.w, Entropy.KL)
    return -(nu / (1.0 - nu)) * float(r @ r) + nu * float(spread) + 2.0 * params.omega_sq * ent
