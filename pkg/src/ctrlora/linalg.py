"""Dense linear algebra primitives shared by the curvature and scheduling code.

Everything works on float64 numpy arrays. Stochastic routines take an explicit
seed (or a ``numpy.random.Generator``) and never touch global RNG state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SYMMETRY_RTOL = 1e-12


class SymmetryError(ValueError):
    """Raised when a matrix that must be symmetric is not."""


class SingularMetricError(ArithmeticError):
    """Raised when a metric has a non-positive eigenvalue after damping."""


class DimensionError(ValueError):
    pass


def make_rng(seed: int | Sequence[int] | np.random.Generator | None) -> np.random.Generator:
    """Return a Philox-backed generator keyed by ``seed``.

    A sequence of ints (e.g. ``(seed, stream, step)``) gives an independent,
    reproducible stream per tuple, which is how the trainer derives per-step
    randomness without carrying generator state around.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        seed = 0
    if isinstance(seed, (int, np.integer)):
        seed = [int(seed)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(seed))))


@dataclass(frozen=True, eq=False)
class SvdResult:
    u_vectors: np.ndarray  # (rows, k)
    singular_values: np.ndarray  # (k,), descending
    v_vectors: np.ndarray  # (cols, k)

    def __len__(self) -> int:
        return len(self.singular_values)

    def triple(self, i: int) -> tuple[float, np.ndarray, np.ndarray]:
        return float(self.singular_values[i]), self.u_vectors[:, i], self.v_vectors[:, i]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def check_symmetric(m: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise SymmetryError(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.linalg.norm(m), np.finfo(float).tiny)
    asym = np.linalg.norm(m - m.T)
    if asym > rtol * scale:
        raise SymmetryError(f"matrix is not symmetric: |M - M^T|_F / |M|_F = {asym / scale:.3e}")
    return m


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def eigh_spd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues in descending order."""
    m = check_symmetric(m)
    vals, vecs = np.linalg.eigh(symmetrize(m))
    return vals[::-1].copy(), vecs[:, ::-1].copy()


def inv_sqrt_spd(m: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Return ``(m + damping*I)^{-1/2}``."""
    if damping < 0:
        raise ValueError("damping must be non-negative")
    m = check_symmetric(m)
    vals, vecs = eigh_spd(m + damping * np.eye(m.shape[0]))
    if vals.size and vals[-1] <= 0.0:
        raise SingularMetricError(
            f"metric has smallest eigenvalue {vals[-1]:.3e} <= 0 after damping {damping:g}"
        )
    return (vecs / np.sqrt(vals)) @ vecs.T


def exact_svd(x: np.ndarray, k: int | None = None) -> SvdResult:
    """Thin SVD through the eigendecomposition of the Gram matrix on the smaller side.

    Columns belonging to (numerically) zero singular values are completed to an
    orthonormal set so the result always has orthonormal factors.
    """
    x = as_matrix(x)
    rows, cols = x.shape
    n = min(rows, cols)
    k = n if k is None else k
    if k < 0 or k > n:
        raise DimensionError(f"k={k} outside [0, {n}] for shape {x.shape}")
    if k == 0:
        return SvdResult(np.zeros((rows, 0)), np.zeros(0), np.zeros((cols, 0)))

    transpose = rows < cols
    a = x.T if transpose else x  # tall: a is (p, q) with p >= q
    _, v = eigh_spd(symmetrize(a.T @ a))
    # |a v| is accurate to eps * sigma_1 absolute, unlike sqrt of the Gram eigenvalues
    av = a @ v
    sigma = np.linalg.norm(av, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, v, av = sigma[order], v[:, order], av[:, order]
    tol = max(sigma[0], 1.0) * n * np.finfo(float).eps * 16
    u = np.zeros((a.shape[0], n))
    keep = sigma > tol
    u[:, keep] = av[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    u = _orthonormal_completion(u, keep)

    u, v, sigma = u[:, :k], v[:, :k], sigma[:k]
    if transpose:
        u, v = v, u
    u, v = _fix_signs(u, v)
    return SvdResult(u, sigma, v)


def _orthonormal_completion(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # QR keeps the span of leading columns; dead columns get a deterministic fill
    filled = u.copy()
    dead = ~keep
    if dead.any():
        filled[:, dead] = make_rng(0).standard_normal((u.shape[0], int(dead.sum())))
    q, r = np.linalg.qr(filled)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of each left vector positive
    if u.shape[1] == 0:
        return u, v
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def randomized_svd(
    x: np.ndarray,
    k: int,
    oversample: int = 8,
    power_iters: int = 2,
    seed: int | Sequence[int] | np.random.Generator | None = 0,
) -> SvdResult:
    """Top-``k`` SVD with a Gaussian range finder and subspace iteration.

    The sketch has ``k + oversample`` columns; each power iteration
    re-orthonormalizes to keep the basis well conditioned. When the sketch
    would cover at least ``1/1.25`` of the smaller dimension the dense SVD is
    used instead (the cutoff fbpca uses), since sketching saves nothing there.
    """
    x = as_matrix(x)
    rows, cols = x.shape
    n = min(rows, cols)
    if k < 0 or k > n:
        raise DimensionError(f"k={k} exceeds min dimension {n} of shape {x.shape}")
    if oversample < 0 or power_iters < 0:
        raise ValueError("oversample and power_iters must be non-negative")
    if k == 0:
        return SvdResult(np.zeros((rows, 0)), np.zeros(0), np.zeros((cols, 0)))

    width = k + oversample
    if width >= n / 1.25:
        return exact_svd(x, k)
    rng = make_rng(seed)
    omega = rng.standard_normal((cols, width))
    q, _ = np.linalg.qr(x @ omega)
    for _ in range(power_iters):
        z, _ = np.linalg.qr(x.T @ q)
        q, _ = np.linalg.qr(x @ z)
    small = exact_svd(q.T @ x)
    u = q @ small.u_vectors[:, :k]
    u, v = _fix_signs(u, small.v_vectors[:, :k])
    return SvdResult(u, small.singular_values[:k].copy(), v)


def kron_quadratic_form(l_factor: np.ndarray, r_factor: np.ndarray, x: np.ndarray) -> float:
    """``trace(x^T L x R)``, i.e. ``vec(x)^T (R kron L) vec(x)`` without forming the product."""
    x = as_matrix(x, "x")
    l_factor = as_matrix(l_factor, "l_factor")
    r_factor = as_matrix(r_factor, "r_factor")
    if l_factor.shape != (x.shape[0], x.shape[0]) or r_factor.shape != (x.shape[1], x.shape[1]):
        raise DimensionError(
            f"factor shapes {l_factor.shape}, {r_factor.shape} do not match x of shape {x.shape}"
        )
    value = float(np.sum((l_factor @ x @ r_factor) * x))
    return max(value, 0.0)
