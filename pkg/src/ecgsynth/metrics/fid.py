"""Frechet distance between Gaussian fits of two feature sets.

Covariances are regularized with ``JITTER * I``. A summary keeps the
centered, scaled feature matrix ``F`` (``cov = F^T F + jitter I``) rather
than the dense d x d covariance, which lets the distance be computed in the
subspace spanned by both sets' features:

on the orthogonal complement of that subspace both covariances equal
``jitter * I``, so ``Tr((Sa Sb)^1/2)`` splits exactly into an r x r problem
plus ``(d - r) * jitter``. With fewer samples than feature dimensions this
is much cheaper than working with full d x d matrices, and it gives the same
value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

JITTER = 1e-6


@dataclass
class GaussianSummary:
    mean: np.ndarray
    factor: np.ndarray  # (N, d) centered features / sqrt(N - 1)
    jitter: float = JITTER
    _cov: np.ndarray | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return self.factor.shape[0]

    @property
    def dim(self) -> int:
        return self.factor.shape[1]

    @property
    def cov(self) -> np.ndarray:
        """Regularized covariance (dense, built on first use)."""
        if self._cov is None:
            c = self.factor.T @ self.factor
            self._cov = 0.5 * (c + c.T) + self.jitter * np.eye(self.dim)
        return self._cov

    def trace(self) -> float:
        return float(np.einsum("ij,ij->", self.factor, self.factor) + self.jitter * self.dim)


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues clipped to 0."""
    sym = 0.5 * (m + m.T)
    w, v = scipy.linalg.eigh(sym)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def summarize(features, jitter: float = JITTER) -> GaussianSummary:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need a (N>=2, d) feature matrix")
    if not np.isfinite(f).all():
        raise ValueError("features contain non-finite values")
    mu = f.mean(axis=0)
    return GaussianSummary(mu, (f - mu) / np.sqrt(f.shape[0] - 1), jitter)


def trace_sqrt_product(a: GaussianSummary, b: GaussianSummary) -> float:
    """``Tr((Sa Sb)^1/2)``.

    In the reduced space this is the nuclear norm of ``Sa^1/2 Sb^1/2``: the
    product times its transpose is ``Sa^1/2 Sb Sa^1/2``, which shares its
    spectrum with ``Sa Sb``. Singular values carry absolute error at machine
    precision times the largest one, without the amplification that taking
    square roots of tiny computed eigenvalues would add.
    """
    if a.dim != b.dim or a.jitter != b.jitter:
        raise ValueError("summaries differ in dimension or jitter")
    d, j = a.dim, a.jitter
    stacked = np.concatenate([a.factor, b.factor]).T  # (d, Na + Nb)
    if stacked.shape[1] >= d:
        sa, sb, rest = a.cov, b.cov, 0
    else:
        q, _ = np.linalg.qr(stacked)
        fa, fb = a.factor @ q, b.factor @ q
        r = q.shape[1]
        sa = fa.T @ fa + j * np.eye(r)
        sb = fb.T @ fb + j * np.eye(r)
        rest = d - r
    prod = psd_sqrt(sa) @ psd_sqrt(sb)
    return float(scipy.linalg.svdvals(prod).sum() + rest * j)


def fid_from_summaries(a: GaussianSummary, b: GaussianSummary) -> float:
    diff = a.mean - b.mean
    val = diff @ diff + a.trace() + b.trace() - 2.0 * trace_sqrt_product(a, b)
    return max(float(val), 0.0)


def fid(features_a, features_b, jitter: float = JITTER) -> float:
    return fid_from_summaries(summarize(features_a, jitter), summarize(features_b, jitter))
