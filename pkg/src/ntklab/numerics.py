"""Dense linear algebra and seeded randomness.

Matrices are plain 2-D float64 numpy arrays. The symmetric eigensolver is a
cyclic Jacobi sweep (row-major pivot order) compiled with numba; singular
values come from the same solver applied to the smaller Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular

from .errors import DimensionError, NumericalError, SymmetryError

SYMMETRY_TOL = 1e-10


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox4x64 (counter-based) stream for ``seed``, optionally forked by integer keys."""
    if keys:
        ss = np.random.SeedSequence([int(seed), *map(int, keys)])
        return np.random.Generator(np.random.Philox(ss))
    return np.random.Generator(np.random.Philox(int(seed)))


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # orthonormal columns

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


@njit(cache=True)
def _jacobi(a, max_sweeps):
    n = a.shape[0]
    v = np.eye(n)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += a[i, j] * a[i, j]
    thresh = (2.2e-16 * np.sqrt(total)) ** 2
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if off <= thresh:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return np.diag(a).copy(), v


def sym_eig(m) -> EigenDecomposition:
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {a.shape}")
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL:
        raise SymmetryError(f"matrix not symmetric (max |a - a^T| = {np.max(np.abs(a - a.T)):.3e})")
    if not np.all(np.isfinite(a)):
        raise NumericalError("sym_eig input contains non-finite entries")
    if a.shape[0] == 0:
        return EigenDecomposition(np.zeros(0), np.zeros((0, 0)))
    work = np.ascontiguousarray(0.5 * (a + a.T))
    w, v = _jacobi(work, 100)
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], np.ascontiguousarray(v[:, order]))


def svd_singular_values(m) -> np.ndarray:
    a = as_matrix(m)
    if a.size == 0:
        raise DimensionError("svd of an empty matrix")
    gram = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    lam = sym_eig(gram).eigenvalues
    return np.sqrt(np.clip(lam, 0.0, None))


@dataclass(frozen=True)
class SingularTriplet:
    value: float
    left: np.ndarray
    right: np.ndarray


def extreme_singular_triplets(m) -> tuple[SingularTriplet, SingularTriplet]:
    """Largest and smallest (of min(rows, cols)) singular triplets via the small-side Gram."""
    a = as_matrix(m)
    if a.size == 0:
        raise DimensionError("svd of an empty matrix")
    if a.shape[1] <= a.shape[0]:
        eig = sym_eig(a.T @ a)
        out = []
        for idx in (0, -1):
            s = float(np.sqrt(max(eig.eigenvalues[idx], 0.0)))
            v = eig.eigenvectors[:, idx]
            u = a @ v / s if s > 0 else np.zeros(a.shape[0])
            out.append(SingularTriplet(s, u, v))
    else:
        eig = sym_eig(a @ a.T)
        out = []
        for idx in (0, -1):
            s = float(np.sqrt(max(eig.eigenvalues[idx], 0.0)))
            u = eig.eigenvectors[:, idx]
            v = a.T @ u / s if s > 0 else np.zeros(a.shape[1])
            out.append(SingularTriplet(s, u, v))
    return out[0], out[1]


def cholesky(a) -> np.ndarray:
    a = as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"cholesky needs a square matrix, got {a.shape}")
    lower = np.zeros_like(a)
    for j in range(n):
        row = lower[j, :j]
        d = a[j, j] - row @ row
        if not d > 0.0:
            raise NumericalError(f"matrix is not positive definite: Cholesky pivot {j} is {d:.3e}")
        ljj = np.sqrt(d)
        lower[j, j] = ljj
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ row) / ljj
    return lower


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a x = b`` for SPD ``a`` by Cholesky plus one step of iterative refinement."""
    a = as_matrix(a, "a")
    b_in = np.asarray(b, dtype=np.float64)
    vector = b_in.ndim == 1
    b2 = b_in[:, None] if vector else as_matrix(b_in, "b")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"solve_spd needs square a, got {a.shape}")
    if b2.shape[0] != a.shape[0]:
        raise DimensionError(f"b has {b2.shape[0]} rows, a has {a.shape[0]}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(a), initial=0.0)):
        raise SymmetryError("solve_spd: a is not symmetric")
    lower = cholesky(a)

    def _solve(rhs):
        y = solve_triangular(lower, rhs, lower=True)
        return solve_triangular(lower.T, y, lower=False)

    x = _solve(b2)
    x = x + _solve(b2 - a @ x)
    return x[:, 0] if vector else x
