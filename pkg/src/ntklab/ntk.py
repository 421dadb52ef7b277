"""Empirical NTK, kernel-regression dynamics, meta-NTK predictions and spectrum tracking."""

from __future__ import annotations

import csv
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import DimensionError, NumericalError
from .model import ModelParams, head_jacobian, jacobian
from .numerics import EigenDecomposition, solve_spd, sym_eig

DEFAULT_RIDGE = 1e-6
COND_FLOOR = 1e-12

Restrict = Literal["all", "linear"]


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("NTKLAB_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class NtkMatrix:
    gram: np.ndarray
    width_norm: float = 1.0
    _spectrum: EigenDecomposition | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        g = np.asarray(self.gram, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise DimensionError(f"NTK gram must be square, got {g.shape}")
        if g.size and np.max(np.abs(g - g.T)) > 1e-9 * max(1.0, np.max(np.abs(g))):
            raise DimensionError("NTK gram is not symmetric")
        self.gram = 0.5 * (g + g.T)

    @property
    def spectrum(self) -> EigenDecomposition:
        if self._spectrum is None:
            self._spectrum = sym_eig(self.gram)
        return self._spectrum

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.spectrum.eigenvalues

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def condition_number(self) -> float:
        return self.lambda_max / max(self.lambda_min, COND_FLOOR)

    @property
    def size(self) -> int:
        return self.gram.shape[0]


def _jac(params: ModelParams, x: np.ndarray, restrict: Restrict) -> np.ndarray:
    if restrict == "all":
        return jacobian(params, x)
    if restrict == "linear":
        return head_jacobian(params, x)
    raise ValueError(f"unknown restriction {restrict!r}")


def empirical_ntk(
    params: ModelParams,
    xa,
    xb=None,
    restrict: Restrict = "all",
    normalize: bool = False,
    block_rows: int = 64,
):
    """Trace-reduced empirical NTK ``sum_q <df_q(x)/dtheta, df_q(x')/dtheta>``.

    Returns an :class:`NtkMatrix` when ``xb`` is omitted (or is ``xa``),
    otherwise the rectangular ``(len(xa), len(xb))`` kernel block. With
    ``normalize`` the kernel is divided by the number of parameters in play.
    """
    xa = np.atleast_2d(np.asarray(xa, dtype=np.float64))
    same = xb is None or xb is xa
    xb = xa if same else np.atleast_2d(np.asarray(xb, dtype=np.float64))
    for x in (xa, xb):
        if x.shape[1] != params.spec.input_dim:
            raise DimensionError(f"input has {x.shape[1]} features, network expects {params.spec.input_dim}")
    p = params.spec.output_dim
    jb = _jac(params, xb, restrict).reshape(xb.shape[0], -1)
    n_cols = jb.shape[1] // p
    scale = 1.0 / n_cols if normalize else 1.0

    def rows(lo):
        blk = jb if same and lo == 0 and xa.shape[0] <= block_rows else None
        ja = blk if blk is not None else _jac(params, xa[lo : lo + block_rows], restrict).reshape(-1, p * n_cols)
        return lo, ja @ jb.T

    out = np.empty((xa.shape[0], xb.shape[0]))
    starts = range(0, xa.shape[0], block_rows)
    threads = worker_threads()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(rows, starts))
    else:
        results = [rows(lo) for lo in starts]
    for lo, blk in results:
        out[lo : lo + blk.shape[0]] = blk
    out *= scale
    if same:
        return NtkMatrix(0.5 * (out + out.T), width_norm=scale)
    return out


def _gram(k) -> np.ndarray:
    return k.gram if isinstance(k, NtkMatrix) else np.asarray(k, dtype=np.float64)


def ntk_regression_predict(phi_train, phi_cross, f0_train, f0_test, y_train, ridge: float = DEFAULT_RIDGE):
    """Linearized-network prediction ``f0(x) + K(x, X) (K(X, X) + ridge I)^-1 (Y - f0(X))``."""
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    k = _gram(phi_train)
    kx = np.atleast_2d(np.asarray(phi_cross, dtype=np.float64))
    f0_train = np.asarray(f0_train, dtype=np.float64)
    f0_test = np.asarray(f0_test, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    if kx.shape[1] != k.shape[0] or y_train.shape != f0_train.shape or y_train.shape[0] != k.shape[0]:
        raise DimensionError(
            f"inconsistent shapes: K {k.shape}, K_cross {kx.shape}, f0_train {f0_train.shape}, y {y_train.shape}"
        )
    if f0_test.shape[0] != kx.shape[0]:
        raise DimensionError(f"f0_test has {f0_test.shape[0]} rows, K_cross has {kx.shape[0]}")
    try:
        alpha = solve_spd(k + ridge * np.eye(k.shape[0]), y_train - f0_train)
    except NumericalError as exc:
        raise NumericalError(f"{exc}; kernel system is singular, use a positive ridge") from exc
    return f0_test + kx @ alpha


# ---------------------------------------------------------------- meta-learning NTK


@dataclass(frozen=True)
class Task:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray


KernelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _flow_operator(gram: np.ndarray, rate: float, time: float, ridge: float) -> np.ndarray:
    """``K^-1 (I - exp(-rate * K * time))`` through the eigendecomposition of ``K + ridge I``."""
    n = gram.shape[0]
    if rate * time == 0.0:
        return np.zeros((n, n))
    eig = sym_eig(gram + ridge * np.eye(n))
    lam = eig.eigenvalues
    if lam[-1] <= COND_FLOOR * max(lam[0], 1.0):
        raise NumericalError(
            f"support kernel is singular (smallest eigenvalue {lam[-1]:.3e}); use a positive ridge"
        )
    coef = -np.expm1(-rate * time * lam) / lam
    v = eig.eigenvectors
    return (v * coef) @ v.T


def task_output(kernel: KernelFn, xq, xs, ys, tau: float, lam: float, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Inner-loop adapted output ``K(xq, xs) K(xs, xs)^-1 (I - e^{-lam K tau}) ys``."""
    xs = np.atleast_2d(xs)
    op = _flow_operator(np.asarray(kernel(xs, xs)), lam, tau, ridge)
    return np.asarray(kernel(np.atleast_2d(xq), xs)) @ (op @ np.asarray(ys, dtype=np.float64))


def meta_ntk_predict(
    kernel: KernelFn,
    support: tuple[np.ndarray, np.ndarray],
    query_x,
    task_bank: Sequence[Task],
    tau: float,
    lam: float,
    t: float,
    eta: float = 1.0,
    ridge: float = DEFAULT_RIDGE,
) -> np.ndarray:
    """Meta-output of an infinitely wide meta-learner after outer training time ``t``.

    The outer kernel between the new task and the bank is the ordinary kernel
    between the new query points and the concatenated bank query points.
    """
    if tau < 0 or t < 0:
        raise ValueError("tau and t must be non-negative")
    xs, ys = support
    inner = task_output(kernel, query_x, xs, ys, tau, lam, ridge)
    if not task_bank:
        return inner
    bank_q = np.concatenate([np.atleast_2d(task.query_x) for task in task_bank])
    resid = np.concatenate(
        [
            np.asarray(task.query_y, dtype=np.float64)
            - task_output(kernel, task.query_x, task.support_x, task.support_y, tau, lam, ridge)
            for task in task_bank
        ]
    )
    outer = _flow_operator(np.asarray(kernel(bank_q, bank_q)), eta, t, ridge)
    return inner + np.asarray(kernel(np.atleast_2d(query_x), bank_q)) @ (outer @ resid)


# ---------------------------------------------------------------- convergence bound


@dataclass(frozen=True)
class ConvergenceCheck:
    eta0: float
    sigma_min: float
    sigma_max: float
    R: float
    losses: np.ndarray
    bounds: np.ndarray
    satisfied: np.ndarray

    @property
    def all_satisfied(self) -> bool:
        return bool(np.all(self.satisfied))


def eta0_from(ntk0: NtkMatrix) -> float:
    return 2.0 / (max(ntk0.lambda_min, 0.0) + ntk0.lambda_max)


def convergence_bound_check(losses, ntk0: NtkMatrix, R: float | None = None, steps=None) -> ConvergenceCheck:
    """Compare observed squared losses against ``(1 - eta0 s_min / 3)^(2t) R^2 / 2``.

    ``R`` defaults to the initial residual norm ``sqrt(2 * losses[0])``;
    ``steps`` gives the step index of each loss (defaults to 0, 1, 2, ...).
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empty loss trace")
    smin = max(ntk0.lambda_min, 0.0)
    smax = ntk0.lambda_max
    eta0 = eta0_from(ntk0)
    if R is None:
        R = float(np.sqrt(2.0 * losses[0]))
    t = np.arange(losses.size) if steps is None else np.asarray(steps, dtype=np.float64)
    rate = 1.0 - eta0 * smin / 3.0
    bounds = rate ** (2.0 * t) * R**2 / 2.0
    satisfied = losses <= bounds * (1.0 + 1e-12)
    return ConvergenceCheck(eta0, smin, smax, float(R), losses, bounds, satisfied)


# ---------------------------------------------------------------- spectrum monitoring


@dataclass(frozen=True)
class SpectrumRecord:
    step: int
    lambda_min: float
    lambda_max: float
    condition_number: float
    base_accuracy: float


class SpectrumTrace(list):
    COLUMNS = ("step", "lambda_min", "lambda_max", "condition_number", "base_accuracy")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self:
                w.writerow([r.step, repr(r.lambda_min), repr(r.lambda_max), repr(r.condition_number), repr(r.base_accuracy)])

    @classmethod
    def from_csv(cls, path) -> SpectrumTrace:
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(
                    SpectrumRecord(
                        int(row["step"]),
                        float(row["lambda_min"]),
                        float(row["lambda_max"]),
                        float(row["condition_number"]),
                        float(row["base_accuracy"]),
                    )
                )
        return out


def spectrum_snapshot(ntk: NtkMatrix, step: int, base_accuracy: float, trace: SpectrumTrace | None = None) -> SpectrumRecord:
    lmin, lmax = ntk.lambda_min, ntk.lambda_max
    rec = SpectrumRecord(int(step), lmin, lmax, lmax / max(lmin, COND_FLOOR), float(base_accuracy))
    if trace is not None:
        trace.append(rec)
    return rec
