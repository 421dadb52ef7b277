"""Self-consistent spectral generalization loss of kernel regression.

For eigenvalues ``lam_i``, target weights ``w_i``, ``N`` samples and noise
``sigma2``, ``beta`` solves ``sum lam_i / (beta + N lam_i) = 1``,
``eps = sum N lam_i^2 / (beta + N lam_i)^2`` and

    L = (sum lam_i w_i^2 (beta / (beta + N lam_i))^2 + eps * sigma2) / (1 - eps).

``beta`` may be negative when the spectrum has fewer than ``N`` modes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, NumericalError

log = logging.getLogger(__name__)

MAX_ITER = 10_000


@dataclass(frozen=True)
class SpectralProblem:
    eigenvalues: np.ndarray
    weights: np.ndarray
    sample_count: int
    noise: float = 0.0

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if lam.size == 0:
            raise ConfigError("empty spectrum")
        if w.shape != lam.shape:
            raise ConfigError(f"{lam.size} eigenvalues but {w.size} weights")
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise ConfigError("eigenvalues must be positive and finite")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be a positive integer")
        if self.noise < 0:
            raise ConfigError("noise variance must be non-negative")
        order = np.argsort(-lam, kind="stable")
        object.__setattr__(self, "eigenvalues", lam[order])
        object.__setattr__(self, "weights", w[order])

    @classmethod
    def unit(cls, eigenvalues, sample_count: int, noise: float = 0.0) -> SpectralProblem:
        lam = np.asarray(eigenvalues, dtype=np.float64)
        return cls(lam, np.ones_like(lam), sample_count, noise)


def consistency_residual(problem: SpectralProblem, beta: float) -> float:
    lam, n = problem.eigenvalues, problem.sample_count
    return float(np.sum(lam / (beta + n * lam)) - 1.0)


def solve_beta(problem: SpectralProblem) -> float:
    """Unique root of the self-consistency sum, by bracketed bisection."""
    lam, n = problem.eigenvalues, problem.sample_count
    pole = -n * lam[-1]

    def f(beta):
        return np.sum(lam / (beta + n * lam)) - 1.0

    # f decreases from +inf at the pole to -1 at +inf
    step = max(abs(pole), float(lam.sum()), 1.0)
    hi = pole + step
    it = 0
    while f(hi) > 0:
        step *= 2.0
        hi = pole + step
        it += 1
        if it > MAX_ITER:
            raise NumericalError(f"could not bracket beta from above (last hi={hi!r})")
    delta = step
    lo = pole + delta
    while f(lo) < 0:
        delta *= 0.5
        lo = pole + delta
        it += 1
        if delta == 0.0 or it > MAX_ITER:
            raise NumericalError(f"could not bracket beta near the pole (last bracket [{lo!r}, {hi!r}])")
    for _ in range(MAX_ITER):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    else:
        raise NumericalError(f"bisection did not converge (bracket [{lo!r}, {hi!r}])")
    return float(lo if abs(f(lo)) <= abs(f(hi)) else hi)


def compute_epsilon(problem: SpectralProblem, beta: float) -> float:
    lam, n = problem.eigenvalues, problem.sample_count
    eps = float(np.sum(n * lam**2 / (beta + n * lam) ** 2))
    if not eps < 1.0:
        raise DomainError(f"epsilon = {eps!r} >= 1: generalization loss undefined (too few spectral modes for N={n})")
    return eps


@dataclass(frozen=True)
class GenLossReport:
    beta: float
    epsilon: float
    loss: float
    term_bias: float
    term_noise: float
    residual: float
    sample_count: int = 0
    noise: float = 0.0
    modes: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def generalization_loss(problem: SpectralProblem) -> GenLossReport:
    beta = solve_beta(problem)
    eps = compute_epsilon(problem, beta)
    lam, w, n = problem.eigenvalues, problem.weights, problem.sample_count
    bias = float(np.sum(lam * w**2 * (beta / (beta + n * lam)) ** 2) / (1.0 - eps))
    noise = eps * problem.noise / (1.0 - eps)
    return GenLossReport(
        beta=beta,
        epsilon=eps,
        loss=bias + noise,
        term_bias=bias,
        term_noise=noise,
        residual=abs(consistency_residual(problem, beta)),
        sample_count=n,
        noise=problem.noise,
        modes=lam.size,
    )


def read_spectrum_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read ``eigenvalue[,weight]`` lines; a non-numeric first line is a header.

    Non-positive eigenvalues (roundoff in a PSD spectrum) are dropped.
    """
    vals, weights = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines()):
        parts = [p.strip() for p in line.split(",") if p.strip()]
        if not parts:
            continue
        try:
            nums = [float(p) for p in parts]
        except ValueError:
            if lineno == 0:
                continue
            raise ConfigError(f"{path}:{lineno + 1}: not a number: {line!r}")
        vals.append(nums[0])
        weights.append(nums[1] if len(nums) > 1 else np.nan)
    lam = np.array(vals)
    w = np.array(weights)
    keep = lam > 0
    if (~keep).any():
        log.warning("dropping %d non-positive eigenvalues from %s", int((~keep).sum()), path)
    lam, w = lam[keep], w[keep]
    return lam, (None if np.all(np.isnan(w)) else np.nan_to_num(w, nan=1.0))
