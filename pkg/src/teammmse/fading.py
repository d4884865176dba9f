"""Spatial covariances and circularly symmetric Gaussian channel draws."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import FactorizationError


@dataclass(frozen=True, eq=False)
class CovarianceSet:
    """Per-link covariances ``R[l, k]`` of shape (L, K, N, N)."""

    R: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=complex)
        if R.ndim != 4 or R.shape[-1] != R.shape[-2]:
            raise ValueError(f"expected (L, K, N, N) covariances, got {R.shape}")
        object.__setattr__(self, "R", R)

    @property
    def shape(self):
        L, K, N, _ = self.R.shape
        return L, N, K

    @cached_property
    def is_isotropic(self):
        n = self.R.shape[-1]
        diag = np.einsum("lkii->lk", self.R).real / n
        return np.allclose(self.R, diag[..., None, None] * np.eye(n), rtol=0, atol=1e-14 * max(diag.max(), 1e-300))

    @cached_property
    def sqrt(self):
        """Hermitian square roots, negative eigenvalues clamped to zero."""
        return hermitian_sqrt(self.R)


def hermitian_sqrt(R, tol=1e-10):
    R = 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))
    w, u = np.linalg.eigh(R)
    scale = np.maximum(np.abs(w).max(axis=-1, keepdims=True), 1e-300)
    if np.any(w < -tol * scale * R.shape[-1]):
        raise FactorizationError("covariance is not positive semidefinite")
    root = np.sqrt(np.clip(w, 0.0, None))
    return (u * root[..., None, :]) @ np.conj(np.swapaxes(u, -1, -2))


def build_covariances(deployment, scenario=None, antennas=None):
    """Uncorrelated model ``R[l, k] = beta[l, k] * I_N``."""
    n = antennas if antennas is not None else scenario.antennas_per_ap
    gains = np.asarray(deployment.gains if hasattr(deployment, "gains") else deployment, float)
    return CovarianceSet(gains[:, :, None, None] * np.eye(n))


def complex_normal(rng, shape):
    """Standard CN(0, 1) entries."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)


def sample_channel(cov, rng, size=None):
    """Draw H of shape (L, N, K), or (size, L, N, K) when ``size`` is given."""
    L, N, K = cov.shape
    lead = () if size is None else (size,)
    w = complex_normal(rng, lead + (L, K, N))
    if cov.is_isotropic:
        gain = np.einsum("lkii->lk", cov.R).real / N
        h = np.sqrt(gain)[..., None] * w
    else:
        h = np.einsum("lknm,...lkm->...lkn", cov.sqrt, w)
    return np.swapaxes(h, -1, -2)
