"""Coupling matrices and the uplink/downlink power systems that link them."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InfeasibleError, SingularSystemError
from .rates import error_quadratic

RHO_MARGIN = 1e-9
NEG_CLAMP = 1e-12


@dataclass(frozen=True, eq=False)
class CouplingMatrices:
    """Diagonals D, Sigma, Gamma as (K,) vectors and the cross-gain matrix B (K, K).

    B[j, k] = E|h_j^H v_k|^2 minus D on the diagonal, so the diagonal holds the
    self-interference variance.
    """

    D: np.ndarray
    B: np.ndarray
    Sigma: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float).ravel()
        K = D.size
        B = np.asarray(self.B, dtype=float).reshape(K, K)
        Sigma = np.asarray(self.Sigma, dtype=float).ravel()
        Gamma = np.broadcast_to(np.asarray(self.Gamma, dtype=float), (K,)).copy()
        if Sigma.size != K:
            raise ValueError("Sigma must have one entry per user")
        if np.any(D < 0) or np.any(Sigma < 0) or np.any(Gamma < 0):
            raise ValueError("D, Sigma and Gamma must be nonnegative")
        for name, val in (("D", D), ("B", B), ("Sigma", Sigma), ("Gamma", Gamma)):
            object.__setattr__(self, name, val)

    @property
    def num_users(self):
        return self.D.size

    def with_targets(self, gamma):
        return CouplingMatrices(self.D, self.B, self.Sigma, gamma)

    def to_json(self):
        return json.dumps({"D": self.D.tolist(), "B": self.B.tolist(),
                           "Sigma": self.Sigma.tolist(), "Gamma": self.Gamma.tolist()})

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        missing = [k for k in ("D", "B", "Sigma", "Gamma") if k not in doc]
        if missing:
            raise ConfigError("missing key", missing[0])
        try:
            return cls(doc["D"], doc["B"], doc["Sigma"], doc["Gamma"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def build_coupling(moments, gamma):
    """Coupling matrices from unscaled moments (``a``, ``b``, ``power_v``).

    ``power_v`` already carries the 1 + lambda weights when the moments were taken
    with a noise augmentation, which gives the weighted Sigma.
    """
    a = np.asarray(moments.a)
    D = np.abs(np.diagonal(a)) ** 2
    B = np.real(np.asarray(moments.b)) - np.diag(D)
    return CouplingMatrices(D, B, np.real(moments.power_v), gamma)


def _active(C):
    return np.flatnonzero(C.Gamma > 0)


def check_feasibility(C):
    """Spectral radius of D^-1 Gamma B^T over the users with positive targets."""
    idx = _active(C)
    if idx.size == 0:
        return 0.0
    D = C.D[idx]
    if np.any(D <= 0):
        raise InfeasibleError("zero useful-signal moment for a user with a positive target",
                              rho=np.inf, index=int(idx[np.argmin(D)]))
    M = (C.Gamma[idx] / D)[:, None] * C.B[np.ix_(idx, idx)].T
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def _solve(A, rhs):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularSystemError("power system is ill-conditioned", 1.0 / cond)
    return np.linalg.solve(A, rhs)


def solve_power_pair(C):
    """Return (p_ul, p_dl) solving the uplink and downlink SINR equalities.

    p_ul = (D Gamma^-1 - B^T)^-1 Sigma 1 and p_dl = (D Gamma^-1 - B)^-1 1 on the users
    with positive targets; users with zero target get zero power.
    """
    K = C.num_users
    p_ul = np.zeros(K)
    p_dl = np.zeros(K)
    idx = _active(C)
    if idx.size == 0:
        return p_ul, p_dl
    rho = check_feasibility(C)
    if not rho < 1 - RHO_MARGIN:
        raise InfeasibleError(f"targets infeasible: spectral radius {rho:.6g}", rho=rho)
    B = C.B[np.ix_(idx, idx)]
    DG = np.diag(C.D[idx] / C.Gamma[idx])
    p_ul[idx] = _solve(DG - B.T, C.Sigma[idx])
    p_dl[idx] = _solve(DG - B, np.ones(idx.size))
    for p in (p_ul, p_dl):
        if np.any(p < -NEG_CLAMP * max(1.0, np.abs(p).max())):
            raise InfeasibleError("negative power in solution", rho=rho)
        np.clip(p, 0.0, None, out=p)
    return p_ul, p_dl


def uplink_sinr(C, p):
    p = np.asarray(p, float)
    den = C.B.T @ p + C.Sigma
    return _ratio(p * C.D, den)


def downlink_sinr(C, p):
    p = np.asarray(p, float)
    den = C.B @ p + 1.0
    return _ratio(p * C.D, den)


def _ratio(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=(den > 0) | (num != 0))
    return out


def conditional_coupling(hhat, v, err_cov, gamma):
    """Per-realization coupling given all pilots, as arrays (S, K), (S, K, K), (S, K), (S, K)."""
    S, L, N, K = hhat.shape
    Gh = np.conj(hhat.reshape(S, L * N, K)).swapaxes(1, 2) @ v.reshape(S, L * N, K)
    second = np.abs(Gh) ** 2 + error_quadratic(v, err_cov)
    D = np.abs(np.diagonal(Gh, axis1=1, axis2=2)) ** 2
    B = second - D[:, None, :] * np.eye(K)
    Sigma = np.sum(np.abs(v) ** 2, axis=(1, 2))
    return D, B, Sigma, np.broadcast_to(np.asarray(gamma, float), (S, K))


def coherent_duality_per_realization(D, B, Sigma, Gamma):
    """Solve the power pair independently for each realization; arrays have leading axis S."""
    S, K = np.shape(D)
    p_ul = np.zeros((S, K))
    p_dl = np.zeros((S, K))
    for s in range(S):
        try:
            p_ul[s], p_dl[s] = solve_power_pair(CouplingMatrices(D[s], B[s], Sigma[s], Gamma[s]))
        except InfeasibleError as exc:
            raise InfeasibleError(f"realization {s}: {exc}", rho=exc.rho, index=s) from None
    return p_ul, p_dl
