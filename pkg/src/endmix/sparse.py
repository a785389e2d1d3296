"""Linear sparse-unmixing baselines.

Nonnegative least squares plus two ADMM solvers: an l1-regularized
nonnegative lasso (per pixel) and its collaborative variant with a row-wise
l2 group penalty across a batch of pixels.  Detection happens afterwards by
hard-thresholding abundances and mapping library samples to classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.optimize

from .spectral import SpectralLibrary

__all__ = [
    "AdmmConfig",
    "AbundanceVector",
    "nnls",
    "sunsal",
    "sunsal_batch",
    "clsunsal",
    "threshold_detect",
    "SUNSAL_LAMBDA_GRID",
    "CLSUNSAL_LAMBDA_GRID",
    "default_threshold_grid",
]

# regularization sweeps used by the benchmark reports
SUNSAL_LAMBDA_GRID = (0.0, 1e-4, 1e-2, 1e-1)
CLSUNSAL_LAMBDA_GRID = (1e-4, 5e-4, 1e-2, 1e-1)


def default_threshold_grid(n: int = 70) -> np.ndarray:
    """``n`` uniformly spaced detection thresholds strictly inside (0, 1)."""
    return np.arange(1, n + 1) / (n + 1)


@dataclass(frozen=True)
class AdmmConfig:
    """Solver knobs shared by the l1 and group-penalty problems."""

    lam: float = 1e-3
    rho: float = 1.0
    max_iters: int = 1000
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.rho <= 0 or self.tol_primal <= 0 or self.tol_dual <= 0:
            raise ValueError("rho and tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass(frozen=True)
class AbundanceVector:
    """Nonnegative coefficients aligned with library sample order."""

    values: np.ndarray
    converged: bool = True

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("values must be 1-D")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("values must be finite and nonnegative")
        object.__setattr__(self, "values", v)


def _as_matrix_and_vector(W, y) -> tuple[np.ndarray, np.ndarray]:
    W = np.asarray(W, dtype=float)
    y = np.asarray(getattr(y, "reflectance", y), dtype=float)
    if W.ndim != 2 or y.ndim != 1 or W.shape[0] != y.size:
        raise ValueError(
            f"matrix is {W.shape} but observation has {y.size} channels"
        )
    if np.any(np.all(W == 0, axis=0)):
        raise ValueError("matrix has an all-zero column")
    return W, y


def nnls(W, y) -> AbundanceVector:
    """Least squares restricted to the nonnegative orthant.

    The result satisfies the first-order conditions: gradient components of
    active (positive) coefficients vanish and those of inactive ones are
    nonnegative, both within 1e-8 relative to ``max |W^T y|``.
    """
    W, y = _as_matrix_and_vector(W, y)
    a, _ = scipy.optimize.nnls(W, y)
    return AbundanceVector(a)


class _QuadraticStep:
    """Cached solve of (W^T W + rho I) x = b for repeated ADMM iterations."""

    def __init__(self, W: np.ndarray, rho: float):
        gram = W.T @ W + rho * np.eye(W.shape[1])
        self._cho = scipy.linalg.cho_factor(gram)

    def __call__(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._cho, b)


def _admm(
    W: np.ndarray,
    Y: np.ndarray,
    cfg: AdmmConfig,
    prox: Callable[[np.ndarray], np.ndarray],
    step: _QuadraticStep | None = None,
) -> tuple[np.ndarray, bool]:
    """Shared ADMM loop for columnwise problems with splitting Z.

    Minimizes (1/2)||Y - WX||_F^2 + penalty(Z) subject to X = Z >= 0, where
    ``prox`` maps the X + U iterate to the penalized, feasible Z.  Returns
    the splitting variable (feasible at every iteration) and a convergence
    flag.
    """
    n = W.shape[1]
    m = Y.shape[1]
    if step is None:
        step = _QuadraticStep(W, cfg.rho)
    wty = W.T @ Y
    Z = np.zeros((n, m))
    U = np.zeros((n, m))
    converged = False
    scale = np.sqrt(n * m)
    for _ in range(cfg.max_iters):
        X = step(wty + cfg.rho * (Z - U))
        Z_new = prox(X + U)
        dual = cfg.rho * np.linalg.norm(Z_new - Z) / scale
        Z = Z_new
        U = U + X - Z
        primal = np.linalg.norm(X - Z) / scale
        if primal < cfg.tol_primal and dual < cfg.tol_dual:
            converged = True
            break
    return Z, converged


def sunsal(M_lib, y, cfg: AdmmConfig) -> AbundanceVector:
    """Nonnegative l1-regularized unmixing of one spectrum by ADMM.

    Solves min (1/2)||y - Ma||^2 + lam*||a||_1 over a >= 0, with no
    sum-to-one constraint.  With ``lam = 0`` this reduces to NNLS; for
    ``lam >= max |M^T y|`` the zero vector is optimal and returned exactly.
    """
    values, converged = sunsal_batch(M_lib, np.asarray(
        getattr(y, "reflectance", y), dtype=float
    ).reshape(-1, 1), cfg)
    return AbundanceVector(values[:, 0], converged=converged)


def sunsal_batch(M_lib, Y, cfg: AdmmConfig) -> tuple[np.ndarray, bool]:
    """Columnwise :func:`sunsal` over a batch; returns (abundances, flag).

    ``Y`` has one spectrum per column; the output has one abundance vector
    per column.  The quadratic-step factorization is computed once.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[1] < 1:
        raise ValueError("Y must be (L, n) with at least one column")
    W, _ = _as_matrix_and_vector(M_lib, Y[:, 0])
    # lambda at or above max |W^T y| makes a = 0 provably optimal for every
    # column; return the exact minimizer instead of iterating toward it
    if cfg.lam > 0 and cfg.lam >= np.abs(W.T @ Y).max():
        return np.zeros((W.shape[1], Y.shape[1])), True
    thresh = cfg.lam / cfg.rho

    def prox(v: np.ndarray) -> np.ndarray:
        return np.maximum(v - thresh, 0.0)

    Z, converged = _admm(W, Y, cfg, prox)
    return Z, converged


def clsunsal(M_lib, Y, cfg: AdmmConfig) -> tuple[np.ndarray, bool]:
    """Collaborative variant: one shared support across a batch of pixels.

    Solves min (1/2)||Y - MA||_F^2 + lam * sum_rows ||A_row||_2 over A >= 0.
    The prox shrinks each row by max(1 - (lam/rho)/||row||_2, 0) and then
    projects onto the nonnegative orthant.  A single-column batch coincides
    with :func:`sunsal` at the same lambda.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[1] < 1:
        raise ValueError("Y must be (L, n) with at least one column")
    W, _ = _as_matrix_and_vector(M_lib, Y[:, 0])
    thresh = cfg.lam / cfg.rho

    def prox(v: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        scale = np.maximum(1.0 - thresh / np.maximum(norms, 1e-300), 0.0)
        return np.maximum(v * scale, 0.0)

    return _admm(W, Y, cfg, prox)


def threshold_detect(
    a: AbundanceVector | np.ndarray, tau: float, lib: SpectralLibrary
) -> frozenset[str]:
    """Classes whose library samples receive abundance strictly above tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    values = a.values if isinstance(a, AbundanceVector) else np.asarray(a, dtype=float)
    if values.size != lib.n_samples:
        raise ValueError(
            f"abundance length {values.size} does not match library size {lib.n_samples}"
        )
    hits = np.nonzero(values > tau)[0]
    return frozenset(lib.samples[i].class_label for i in hits)
