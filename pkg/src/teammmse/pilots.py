"""Uplink pilot observations and linear MMSE channel estimation."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .fading import complex_normal, sample_channel


@dataclass(frozen=True, eq=False)
class PilotConfig:
    """Orthogonal codebook ``phi`` (columns of squared norm tau_p) and per-user pilot powers."""

    phi: np.ndarray
    pilot_power: np.ndarray
    pilot_of: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=complex)
        tau = phi.shape[0]
        if phi.shape != (tau, tau):
            raise ValueError("pilot codebook must be square")
        if not np.allclose(phi.conj().T @ phi, tau * np.eye(tau), atol=1e-10 * tau):
            raise ValueError("pilot columns must be orthogonal with squared norm tau_p")
        pilot_of = np.asarray(self.pilot_of, dtype=int)
        power = np.broadcast_to(np.asarray(self.pilot_power, dtype=float), pilot_of.shape).copy()
        if np.any(power < 0):
            raise ValueError("pilot powers must be nonnegative")
        if pilot_of.size and (pilot_of.min() < 0 or pilot_of.max() >= tau):
            raise ValueError("pilot index out of range")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "pilot_of", pilot_of)
        object.__setattr__(self, "pilot_power", power)

    @property
    def pilot_len(self):
        return self.phi.shape[0]

    @property
    def num_users(self):
        return self.pilot_of.size

    def copilots(self, k):
        return np.flatnonzero(self.pilot_of == self.pilot_of[k])

    @classmethod
    def build(cls, pilot_of, pilot_len, pilot_power, codebook="dft"):
        return cls(make_codebook(pilot_len, codebook), pilot_power, pilot_of)

    @classmethod
    def from_deployment(cls, deployment, scenario, codebook="dft"):
        return cls.build(deployment.pilot_of, scenario.pilot_len, scenario.pilot_power, codebook)


def make_codebook(pilot_len, kind="dft"):
    if kind == "dft":
        # unnormalized DFT: entries of unit modulus, so columns have norm^2 = tau_p
        return scipy.linalg.dft(pilot_len)
    if kind == "identity":
        return np.sqrt(pilot_len) * np.eye(pilot_len, dtype=complex)
    raise ValueError(f"unknown codebook {kind!r}")


def observe_pilots(H, cfg, rng=None, noise=True):
    """Received pilot block ``Y_l`` for every AP; H is (..., L, N, K), result (..., L, N, tau_p)."""
    H = np.asarray(H)
    sent = (np.sqrt(cfg.pilot_power)[:, None] * cfg.phi[:, cfg.pilot_of].conj().T)  # (K, tau)
    Y = H @ sent
    if noise:
        Y = Y + complex_normal(rng, Y.shape)
    return Y


def decorrelate(Y, phi_j):
    """Project one AP's pilot block onto pilot ``phi_j``; unit-variance noise."""
    phi_j = np.asarray(phi_j)
    return (Y @ phi_j) / np.sqrt(phi_j.shape[0])


def decorrelate_all(Y, cfg):
    return (Y @ cfg.phi) / np.sqrt(cfg.pilot_len)


@dataclass(frozen=True, eq=False)
class EstimatorStats:
    """Deployment-level estimator quantities; independent of the fading draw."""

    filters: np.ndarray   # (L, K, N, N): hhat = filters @ y
    err_cov: np.ndarray   # (L, K, N, N)
    isotropic: bool = False


def estimator_stats(cov, cfg):
    R = cov.R
    L, K, N, _ = R.shape
    tau = cfg.pilot_len
    gain = tau * cfg.pilot_power  # (K,)
    eye = np.eye(N)
    # Q[l, t] = sum_{i on pilot t} tau p_i R[l, i] + I
    Q = np.tile(eye, (L, tau, 1, 1)).astype(complex)
    for k in range(K):
        Q[:, cfg.pilot_of[k]] += gain[k] * R[:, k]
    Qk = Q[:, cfg.pilot_of]  # (L, K, N, N)
    RQinv = np.linalg.solve(Qk, R).conj().swapaxes(-1, -2)  # R Q^{-1} (both Hermitian)
    filters = np.sqrt(gain)[None, :, None, None] * RQinv
    err = R - gain[None, :, None, None] * (RQinv @ R)
    err = 0.5 * (err + err.conj().swapaxes(-1, -2))
    return EstimatorStats(filters, err, bool(cov.is_isotropic))


@dataclass(frozen=True, eq=False)
class EstimateSet:
    hhat: np.ndarray      # (..., L, N, K)
    err_cov: np.ndarray   # (L, K, N, N)

    def local(self, l):
        """Stacked local estimates H_hat_l of shape (..., N, K)."""
        return self.hhat[..., l, :, :]


def apply_filters(y, stats):
    """Map decorrelated statistics (..., L, N, K) to estimates of the same shape."""
    if stats.isotropic:
        scale = np.einsum("lkii->lk", stats.filters) / stats.filters.shape[-1]
        return y * scale[:, None, :]
    return np.einsum("lknm,...lmk->...lnk", stats.filters, y)


def estimate_channels(obs, cov, cfg, stats=None):
    """Linear MMSE estimates from the raw pilot blocks ``obs`` (..., L, N, tau_p)."""
    obs = np.asarray(obs)
    L, N, K = cov.shape
    if obs.shape[-3:] != (L, N, cfg.pilot_len) or cfg.num_users != K:
        raise ValueError(f"pilot observation shape {obs.shape} does not match (L={L}, N={N}, tau_p={cfg.pilot_len})")
    stats = estimator_stats(cov, cfg) if stats is None else stats
    y = decorrelate_all(obs, cfg)[..., cfg.pilot_of]
    return EstimateSet(apply_filters(y, stats), stats.err_cov)


def aggregate_error_cov(est, p, l=None):
    """Psi_l = sum_j p_j C_{l,j}; p may be (K,) or per-realization (S, K)."""
    err = est.err_cov if isinstance(est, EstimateSet) else np.asarray(est)
    if l is not None:
        err = err[l]
        return np.einsum("knm,...k->...nm", err, np.asarray(p, dtype=float))
    return np.einsum("lknm,...k->...lnm", err, np.asarray(p, dtype=float))


def simulate(cov, cfg, size, rng, stats=None):
    """Draw ``size`` channel realizations with their estimates: (H, hhat), each (size, L, N, K)."""
    stats = estimator_stats(cov, cfg) if stats is None else stats
    H = sample_channel(cov, rng, size)
    Y = observe_pilots(H, cfg, rng)
    y = decorrelate_all(Y, cfg)[..., cfg.pilot_of]
    return H, apply_filters(y, stats)
