"""Multivariate Gaussians stored as (mean, lower Cholesky factor)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Gaussian:
    """N(mean, L Lᵀ) with ``cov_factor`` = L lower triangular, positive diagonal.

    ``validate=False`` admits degenerate factors (a zero L is useful in tests
    of :func:`sample`); nothing else in the package builds one.
    """

    mean: np.ndarray
    cov_factor: np.ndarray
    validate: bool = True

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        L = np.atleast_2d(np.asarray(self.cov_factor, dtype=np.float64))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", L)
        d = mean.shape[0]
        if mean.ndim != 1 or L.shape != (d, d):
            raise ValueError(f"Gaussian: mean shape {mean.shape} vs factor shape {L.shape}")
        if self.validate:
            if np.any(np.triu(L, 1) != 0):
                raise ValueError("Gaussian: cov_factor must be lower triangular")
            if np.any(np.diag(L) <= 0) or not np.all(np.isfinite(L)):
                raise ValueError("Gaussian: cov_factor needs a finite, positive diagonal")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    @classmethod
    def from_cov(cls, mean, cov) -> Gaussian:
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        return cls(mean, np.linalg.cholesky(0.5 * (cov + cov.T)))

    @classmethod
    def diagonal(cls, mean, var) -> Gaussian:
        return cls(mean, np.diag(np.sqrt(np.asarray(var, dtype=np.float64))))


def _check_dim(op: str, d1: int, d2: int) -> None:
    if d1 != d2:
        raise ValueError(f"{op}: dimension mismatch ({d1} vs {d2})")


def log_pdf(g: Gaussian, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    _check_dim("log_pdf", g.dim, x.shape[0])
    L = g.cov_factor
    white = solve_triangular(L, x - g.mean, lower=True)
    return float(
        -0.5 * g.dim * LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * white @ white
    )


def sample(g: Gaussian, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``z`` standard normal; ``size`` adds a leading axis."""
    if size is None:
        return g.mean + g.cov_factor @ rng.standard_normal(g.dim)
    z = rng.standard_normal((size, g.dim))
    return g.mean + z @ g.cov_factor.T


def kl_divergence(q: Gaussian, p: Gaussian) -> float:
    _check_dim("kl_divergence", q.dim, p.dim)
    Lp, Lq = p.cov_factor, q.cov_factor
    M = solve_triangular(Lp, Lq, lower=True)
    diff = solve_triangular(Lp, p.mean - q.mean, lower=True)
    logdet = 2.0 * (np.sum(np.log(np.diag(Lp))) - np.sum(np.log(np.diag(Lq))))
    kl = 0.5 * (np.sum(M * M) + diff @ diff - q.dim + logdet)
    return float(max(kl, 0.0))


def gibbs_z_conditional(
    A: np.ndarray,
    next_factor: np.ndarray,
    z_next: np.ndarray,
    q: Gaussian,
    bias: np.ndarray | None = None,
) -> Gaussian:
    """Normalized product N(z_next; A z + bias, B Bᵀ) · q(z), as a Gaussian over z.

    Worked in information form::

        precision = Aᵀ Σ⁻¹ A + Σ_q⁻¹
        mean      = precision⁻¹ (Aᵀ Σ⁻¹ (z_next - bias) + Σ_q⁻¹ μ_q)

    with Σ = B Bᵀ for the successor's dynamics.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(next_factor, dtype=np.float64))
    z_next = np.atleast_1d(np.asarray(z_next, dtype=np.float64))
    d = q.dim
    if A.shape != (z_next.shape[0], d) or B.shape != (z_next.shape[0],) * 2:
        raise ValueError(
            f"gibbs_z_conditional: A {A.shape}, factor {B.shape}, z_next {z_next.shape}, q dim {d}"
        )
    if np.any(np.diag(B) <= 0) or np.any(np.diag(q.cov_factor) <= 0):
        raise ValueError("gibbs_z_conditional: singular covariance factor")
    target = z_next if bias is None else z_next - bias
    BA = solve_triangular(B, A, lower=True)  # B⁻¹A
    Bz = solve_triangular(B, target, lower=True)
    Lq_inv = solve_triangular(q.cov_factor, np.eye(d), lower=True)
    prec_q = Lq_inv.T @ Lq_inv
    precision = BA.T @ BA + prec_q
    precision = 0.5 * (precision + precision.T)
    try:
        Lp = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as exc:
        raise ValueError("gibbs_z_conditional: precision is not positive definite") from exc
    info = BA.T @ Bz + prec_q @ q.mean
    mean = cho_solve((Lp, True), info)
    cov = cho_solve((Lp, True), np.eye(d))
    cov = 0.5 * (cov + cov.T)
    return Gaussian(mean, np.linalg.cholesky(cov))
