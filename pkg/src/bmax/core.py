"""Domain types, simplex arithmetic, entropies and error metrics."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIMPLEX_TOL = 1e-9
# entries below this are treated as exact zeros in x*log(x)
LOG_ZERO_CUTOFF = 1e-300


class DataError(ValueError):
    """Raised for malformed inputs: shape mismatches, non-finite values, bad weights."""


class Entropy(enum.Enum):
    KL = "kl"
    LINEAR = "linear"

    @classmethod
    def parse(cls, value: "Entropy | str") -> "Entropy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DataError(f"unknown entropy {value!r}; expected 'kl' or 'linear'") from None


def _as_vector(x, name: str, n: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DataError(f"{name} has {arr.shape[0]} entries, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Candidate predictors evaluated at the n design points.

    ``candidates`` has shape ``(M, n)``: row ``j`` is the vector f_j.
    """

    candidates: np.ndarray
    l2_bound: float = field(init=False)

    def __post_init__(self):
        F = np.asarray(self.candidates, dtype=float)
        if F.ndim == 1:
            F = F[None, :]
        if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
            raise DataError(f"candidates must be a non-empty (M, n) array, got shape {F.shape}")
        if not np.all(np.isfinite(F)):
            raise DataError("candidates contain non-finite entries")
        F = _freeze(F)
        object.__setattr__(self, "candidates", F)
        object.__setattr__(self, "l2_bound", float(np.sqrt(np.max(np.sum(F * F, axis=1)))))

    @classmethod
    def from_columns(cls, columns) -> "Dictionary":
        """Build from an ``(n, M)`` design-by-candidate matrix."""
        return cls(np.asarray(columns, dtype=float).T)

    @property
    def M(self) -> int:
        return self.candidates.shape[0]

    @property
    def n(self) -> int:
        return self.candidates.shape[1]

    def restrict(self, rows) -> "Dictionary":
        """Dictionary restricted to a subset of design points."""
        return Dictionary(self.candidates[:, rows])


@dataclass(frozen=True, eq=False)
class Observation:
    y: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        y = _as_vector(self.y, "y")
        if y.shape[0] < 1:
            raise DataError("y must have at least one entry")
        object.__setattr__(self, "y", _freeze(y))
        if self.truth is not None:
            t = _as_vector(self.truth, "truth", y.shape[0])
            object.__setattr__(self, "truth", _freeze(t))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def restrict(self, rows) -> "Observation":
        truth = None if self.truth is None else self.truth[rows]
        return Observation(self.y[rows], truth)


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    """A point of the probability simplex.

    Sums within ``SIMPLEX_TOL`` of one are renormalized; anything further off
    is rejected.
    """

    w: np.ndarray

    def __post_init__(self):
        w = _as_vector(self.w, "weights")
        if w.shape[0] < 1:
            raise DataError("weights must have at least one entry")
        if np.any(w < 0):
            raise DataError("weights must be nonnegative")
        total = float(np.sum(w))
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise DataError(f"weights sum to {total!r}, not 1")
        object.__setattr__(self, "w", _freeze(w / total))

    @classmethod
    def flat(cls, m: int) -> "SimplexWeights":
        return cls(np.full(m, 1.0 / m))

    @classmethod
    def vertex(cls, m: int, j: int) -> "SimplexWeights":
        w = np.zeros(m)
        w[j] = 1.0
        return cls(w)

    def __len__(self) -> int:
        return self.w.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.w if dtype is None else self.w.astype(dtype)


@dataclass(frozen=True, eq=False)
class AggregationParams:
    """Tuning of the aggregation objectives.

    ``nu`` lives in [0, 1); the value 0 is only meaningful for the projection
    estimator and is rejected by the duality machinery.
    """

    nu: float
    omega_sq: float
    prior: SimplexWeights
    entropy: Entropy = Entropy.KL

    def __post_init__(self):
        nu = float(self.nu)
        omega_sq = float(self.omega_sq)
        if not (0.0 <= nu < 1.0):
            raise DataError(f"nu must lie in [0, 1), got {nu}")
        if not (omega_sq > 0.0 and math.isfinite(omega_sq)):
            raise DataError(f"omega_sq must be positive and finite, got {omega_sq}")
        prior = self.prior
        if not isinstance(prior, SimplexWeights):
            prior = SimplexWeights(prior)
        if np.any(prior.w <= 0):
            raise DataError("prior must put positive mass on every candidate")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "omega_sq", omega_sq)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "entropy", Entropy.parse(self.entropy))

    @classmethod
    def flat(cls, m: int, nu: float = 0.5, omega_sq: float = 1.0,
             entropy: Entropy | str = Entropy.KL) -> "AggregationParams":
        return cls(nu, omega_sq, SimplexWeights.flat(m), Entropy.parse(entropy))

    @property
    def log_prior(self) -> np.ndarray:
        return np.log(self.prior.w)

    def replace(self, **changes) -> "AggregationParams":
        kw = dict(nu=self.nu, omega_sq=self.omega_sq, prior=self.prior, entropy=self.entropy)
        kw.update(changes)
        return AggregationParams(**kw)


def _weights(lam) -> np.ndarray:
    return lam.w if isinstance(lam, SimplexWeights) else np.asarray(lam, dtype=float)


def mix(dictionary: Dictionary, lam) -> np.ndarray:
    """Weighted sum of candidates, ``sum_j lam_j f_j``."""
    w = _weights(lam)
    if w.shape != (dictionary.M,):
        raise DataError(f"weights have shape {w.shape}, dictionary has M={dictionary.M}")
    return w @ dictionary.candidates


def _xlogx_ratio(lam: np.ndarray, prior: np.ndarray) -> np.ndarray:
    out = np.zeros_like(lam)
    pos = lam >= LOG_ZERO_CUTOFF
    out[pos] = lam[pos] * (np.log(lam[pos]) - np.log(prior[pos]))
    return out


def _check_pair(lam, prior) -> tuple[np.ndarray, np.ndarray]:
    a, b = _weights(lam), _weights(prior)
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.shape} vs {b.shape}")
    if np.any(b <= 0):
        raise DataError("prior has a zero entry")
    return a, b


def kl_divergence(lam, prior) -> float:
    a, b = _check_pair(lam, prior)
    return float(np.sum(_xlogx_ratio(a, b)))


def rho_entropy(lam, prior, entropy: Entropy | str = Entropy.KL) -> float:
    """KL divergence (rho(t)=t) or linear entropy ``sum lam_j log(1/pi_j)`` (rho(t)=1)."""
    entropy = Entropy.parse(entropy)
    a, b = _check_pair(lam, prior)
    if entropy is Entropy.KL:
        return float(np.sum(_xlogx_ratio(a, b)))
    return float(-a @ np.log(b))


def mse(estimate, truth) -> float:
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape or est.ndim != 1 or est.shape[0] < 1:
        raise DataError(f"shape mismatch: {est.shape} vs {tru.shape}")
    diff = est - tru
    return float(diff @ diff) / est.shape[0]


def candidate_mses(dictionary: Dictionary, truth) -> np.ndarray:
    tru = _as_vector(truth, "truth", dictionary.n)
    diff = dictionary.candidates - tru
    return np.einsum("ij,ij->i", diff, diff) / dictionary.n


def oracle_index(dictionary: Dictionary, truth) -> int:
    """Index of the candidate with smallest true MSE (smallest index on ties)."""
    return int(np.argmin(candidate_mses(dictionary, truth)))


def regret(estimate, truth, dictionary: Dictionary) -> float:
    if np.asarray(estimate).shape != (dictionary.n,):
        raise DataError("estimate length does not match the dictionary")
    k = oracle_index(dictionary, truth)
    return mse(estimate, truth) - mse(dictionary.candidates[k], truth)


# --- CSV io -----------------------------------------------------------------

def load_csv(path) -> tuple[Dictionary, Observation]:
    """Read ``y[,truth],f1..fM`` columns; one row per design point."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise DataError(f"{path}: need a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "y":
        raise DataError(f"{path}: first column must be 'y'")
    has_truth = len(header) > 1 and header[1] == "truth"
    fcols = header[2:] if has_truth else header[1:]
    if not fcols:
        raise DataError(f"{path}: no candidate columns")
    expected = [f"f{j + 1}" for j in range(len(fcols))]
    if fcols != expected:
        raise DataError(f"{path}: candidate columns must be named f1..f{len(fcols)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    y = data[:, 0]
    truth = data[:, 1] if has_truth else None
    F = data[:, 2:] if has_truth else data[:, 1:]
    return Dictionary.from_columns(F), Observation(y, truth)


def save_csv(path, dictionary: Dictionary, obs: Observation) -> None:
    header = ["y"] + (["truth"] if obs.truth is not None else [])
    header += [f"f{j + 1}" for j in range(dictionary.M)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dictionary.n):
            row = [obs.y[i]] + ([obs.truth[i]] if obs.truth is not None else [])
            row += list(dictionary.candidates[:, i])
            w.writerow([repr(float(v)) for v in row])
