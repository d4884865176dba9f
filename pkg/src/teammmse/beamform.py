"""MSE-optimal beamformers for centralized, multi-cell, local-team and mixed-team CSI.

Array conventions used throughout:

* ``hhat``: estimates of shape (S, L, N, K) for S realizations
* ``err_cov``: estimation-error covariances (L, K, N, N)
* ``p``: powers (K,) or per-realization (S, K)
* ``lam``: per-AP noise augmentation (L,), zero by default
* beamformers ``v``: (S, L, N, K); column k stacked over APs is v_k
"""

from dataclasses import dataclass

import numpy as np

from . import _mc
from .errors import SingularSystemError
from .netgen import CsiRegime, cluster_mask
from .pilots import aggregate_error_cov, estimator_stats, simulate

RCOND_MIN = 1e-12


def _herm(x):
    return np.conj(np.swapaxes(x, -1, -2))


def _lam(lam, num_aps):
    if lam is None:
        return np.zeros(num_aps)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("lambda must be nonnegative")
    return np.broadcast_to(lam, (num_aps,))


def _rows(p):
    """Powers as a 2-D (S or 1, K) array."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("powers must be nonnegative")
    return p[None, :] if p.ndim == 1 else p


@dataclass(frozen=True, eq=False)
class BeamformerSet:
    v: np.ndarray        # (S, L, N, K)
    regime: CsiRegime
    mask: np.ndarray     # (L, K) bool

    def block(self, l, k):
        return self.v[..., l, :, k]

    def masking_holds(self):
        off = np.broadcast_to(~self.mask[:, None, :], self.v.shape)
        return not np.any(self.v[off])


def local_mmse_stage(hhat_l, psi_l, p, lam_l=0.0):
    """V_l = (H_l P H_l^H + Psi_l + (1 + lam_l) I)^-1 H_l P^(1/2).

    Broadcasts over leading axes: ``hhat_l`` (..., N, K), ``psi_l`` (..., N, N),
    ``p`` (..., K) and ``lam_l`` (...).
    """
    hhat_l = np.asarray(hhat_l)
    n = hhat_l.shape[-2]
    hp = hhat_l * np.sqrt(np.asarray(p, dtype=float))[..., None, :]
    noise = (1.0 + np.asarray(lam_l, dtype=float))[..., None, None] * np.eye(n)
    A = hp @ _herm(hp) + psi_l + noise
    return np.linalg.solve(A, hp)


def local_stages(hhat, err_cov, p, lam=None):
    """Local MMSE stages for every AP, (S, L, N, K)."""
    L = hhat.shape[-3]
    p2 = _rows(p)
    psi = aggregate_error_cov(err_cov, p2)          # (S|1, L, N, N)
    return local_mmse_stage(hhat, psi, p2[:, None, :], _lam(lam, L))


def _block_diag(blocks):
    """Stack (..., q, N, N) blocks into (..., qN, qN)."""
    *lead, q, n, _ = blocks.shape
    out = np.zeros((*lead, q * n, q * n), dtype=blocks.dtype)
    for i in range(q):
        out[..., i * n:(i + 1) * n, i * n:(i + 1) * n] = blocks[..., i, :, :]
    return out


def _groups(clusters):
    groups = {}
    for k, c in enumerate(clusters):
        groups.setdefault(tuple(int(l) for l in np.sort(c)), []).append(k)
    return groups


def centralized_mmse(hhat, err_cov, p, clusters, lam=None, users=None):
    """Clustered centralized MMSE beamformers, (S, L, N, K).

    Rows of AP blocks outside each user's cluster are zero; the solve is done on the
    cluster sub-block, which is what the masked full-size formula reduces to.
    """
    S, L, N, K = hhat.shape
    lam = _lam(lam, L)
    p2 = _rows(p)
    psi = aggregate_error_cov(err_cov, p2)  # (S|1, L, N, N)
    v = np.zeros_like(hhat, dtype=complex)
    wanted = set(range(K)) if users is None else set(int(k) for k in np.atleast_1d(users))
    for aps, members in _groups(clusters).items():
        members = [k for k in members if k in wanted]
        if not members:
            continue
        C = list(aps)
        q = len(C)
        hp = (hhat[:, C] * np.sqrt(p2)[:, None, None, :]).reshape(S, q * N, K)
        noise = np.repeat(1.0 + lam[C], N)
        A = hp @ _herm(hp) + _block_diag(psi[:, C]) + np.diag(noise)
        X = np.linalg.solve(A, hp[:, :, members])
        for i, k in enumerate(members):
            v[..., k][:, C] = X[:, :, i].reshape(S, q, N)
    return v


def multicell_mmse(hhat, err_cov, p, serving, lam=None, V=None):
    """Single-AP service: v_{l,k} = V_l e_k at the serving AP, zero elsewhere."""
    V = local_stages(hhat, err_cov, p, lam) if V is None else V
    serving = np.asarray(serving, dtype=int)
    users = np.arange(hhat.shape[-1])
    v = np.zeros_like(V)
    v[:, serving, :, users] = V[:, serving, :, users]
    return v


@dataclass(frozen=True, eq=False)
class PiMatrices:
    pi: np.ndarray        # (L, K, K)
    stderr: np.ndarray    # (L, K, K), modulus of complex standard error
    samples: int

    def hermitian_eigs(self):
        h = 0.5 * (self.pi + _herm(self.pi))
        return np.linalg.eigvalsh(h)

    def eig_tolerance(self):
        """Per-AP standard error bound for eigenvalues (Frobenius norm of entry errors)."""
        return np.sqrt(np.sum(self.stderr ** 2, axis=(-1, -2)))


def pi_samples(hhat, err_cov, p, lam=None, V=None):
    """Per-realization P^(1/2) H_l^H V_l, shape (S, L, K, K)."""
    V = local_stages(hhat, err_cov, p, lam) if V is None else V
    sp = np.sqrt(_rows(p))[:, None, :, None]
    return sp * (_herm(hhat) @ V)


def compute_pi_from(hhat, err_cov, p, lam=None, batches=_mc.DEFAULT_BATCHES):
    """Monte Carlo estimate of E[P^(1/2) H_l^H V_l] from pre-drawn estimates."""
    S = hhat.shape[0]
    if S < 1:
        raise ValueError("compute_pi needs at least one sample")
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError("the statistical stage needs deterministic powers")
    sizes = _mc.batch_sizes(S, batches)
    # one batch at a time: the per-sample array is (S, L, K, K)
    edges = np.concatenate(([0], np.cumsum(sizes)))
    reps = np.stack([pi_samples(hhat[a:b], err_cov, p, lam).mean(axis=0)
                     for a, b in zip(edges[:-1], edges[1:])])
    re, se_re = _mc.mean_stderr(reps.real, sizes)
    im, se_im = _mc.mean_stderr(reps.imag, sizes)
    return PiMatrices(re + 1j * im, np.hypot(se_re, se_im), S)


def compute_pi(cov, cfg, p, lam=None, samples=1000, rng=None, chunk=4096):
    if samples < 1:
        raise ValueError("compute_pi needs at least one sample")
    stats = estimator_stats(cov, cfg)
    parts = []
    for start in range(0, samples, chunk):
        parts.append(simulate(cov, cfg, min(chunk, samples - start), rng, stats)[1])
    return compute_pi_from(np.concatenate(parts), stats.err_cov, p, lam)


def statistical_system(pi, cluster):
    """Block matrix with identity diagonal blocks and Pi_j in block column j."""
    cluster = [int(l) for l in cluster]
    K = pi.shape[-1]
    q = len(cluster)
    lead = pi.shape[:-3]
    M = np.zeros((*lead, q * K, q * K), dtype=complex)
    for b, j in enumerate(cluster):
        col = pi[..., j, :, :]
        for a in range(q):
            M[..., a * K:(a + 1) * K, b * K:(b + 1) * K] = np.eye(K) if a == b else col
    return M


def team_statistical_stage(pi, k, cluster):
    """Solve c_l + sum_{j != l} Pi_j c_j = e_k over the cluster.

    ``pi`` is (L, K, K), or (S, L, K, K) for per-realization conditional stages.
    Returns c of shape (L, K) or (S, L, K), zero outside the cluster.
    """
    pi = pi.pi if isinstance(pi, PiMatrices) else np.asarray(pi)
    cluster = np.sort(np.asarray(cluster, dtype=int))
    L, K = pi.shape[-3], pi.shape[-1]
    q = len(cluster)
    lead = pi.shape[:-3]
    c = np.zeros((*lead, L, K), dtype=complex)
    if q == 1:
        c[..., cluster[0], k] = 1.0
        return c
    M = statistical_system(pi, cluster)
    rcond = 1.0 / np.abs(np.linalg.cond(M, 1))
    worst = np.min(rcond)
    if not np.isfinite(worst) or worst < RCOND_MIN:
        raise SingularSystemError("statistical beamforming stage is singular", float(worst))
    rhs = np.zeros(q * K, dtype=complex)
    rhs[k::K] = 1.0
    sol = np.linalg.solve(M, np.broadcast_to(rhs, (*lead, q * K))[..., None])[..., 0]
    c[..., cluster, :] = sol.reshape(*lead, q, K)
    return c


def statistical_stages(pi, clusters):
    """Stacked stages c[..., l, :, k] = c_{l,k}, shape (L, K, K) or (S, L, K, K)."""
    pi = pi.pi if isinstance(pi, PiMatrices) else np.asarray(pi)
    K = pi.shape[-1]
    return np.stack([team_statistical_stage(pi, k, clusters[k]) for k in range(K)], axis=-1)


def assemble_local_tmmse(V, c):
    """v_{l,k} = V_l c_{l,k}; ``c`` from :func:`statistical_stages`."""
    return V @ c


class Scheme:
    """A beamforming policy: estimates (and powers) in, beamformers out."""

    name = "scheme"
    regime = None

    def __init__(self, err_cov, clusters):
        self.err_cov = np.asarray(err_cov)
        self.clusters = [np.sort(np.asarray(c, dtype=int)) for c in clusters]

    @property
    def mask(self):
        return cluster_mask(self.clusters, self.err_cov.shape[0])

    def beamformers(self, hhat, p, lam=None):
        raise NotImplementedError

    def __call__(self, hhat, p, lam=None):
        return BeamformerSet(self.beamformers(hhat, p, lam), self.regime, self.mask)


class CentralizedMMSE(Scheme):
    name = "centralized"
    regime = CsiRegime.CELL_FREE_CENTRALIZED

    def beamformers(self, hhat, p, lam=None):
        return centralized_mmse(hhat, self.err_cov, p, self.clusters, lam)


class MultiCellMMSE(Scheme):
    name = "multicell"
    regime = CsiRegime.MULTI_CELL

    def __init__(self, err_cov, serving):
        serving = np.asarray(serving, dtype=int)
        super().__init__(err_cov, [[l] for l in serving])
        self.serving = serving

    def beamformers(self, hhat, p, lam=None):
        return multicell_mmse(hhat, self.err_cov, p, self.serving, lam)


class LocalTeamMMSE(Scheme):
    """Local MMSE stages combined by statistical stages fitted on a separate estimate bank."""

    name = "local"
    regime = CsiRegime.CELL_FREE_LOCAL

    def __init__(self, err_cov, clusters, stats_hhat):
        super().__init__(err_cov, clusters)
        self.stats_hhat = stats_hhat
        self._cache = {}

    def _key(self, p, lam):
        return np.asarray(p, float).tobytes() + _lam(lam, self.err_cov.shape[0]).tobytes()

    def pi(self, p, lam=None):
        key = self._key(p, lam)
        if key not in self._cache:
            pim = compute_pi_from(self.stats_hhat, self.err_cov, p, lam)
            self._cache = {key: (pim, statistical_stages(pim, self.clusters))}
        return self._cache[key][0]

    def stages(self, p, lam=None):
        self.pi(p, lam)
        return self._cache[self._key(p, lam)][1]

    def beamformers(self, hhat, p, lam=None):
        p = np.asarray(p, dtype=float)
        if p.ndim != 1:
            raise ValueError("local team MMSE requires deterministic powers")
        return assemble_local_tmmse(local_stages(hhat, self.err_cov, p, lam), self.stages(p, lam))


class MixedTeamMMSE(Scheme):
    """Team MMSE with common information Z = pilots of the ``shared`` APs.

    ``p`` may be a deterministic vector or a callable mapping the shared
    estimates (S, |shared|, N, K) to per-realization powers (S, K).  Conditional
    statistical stages of unshared APs are estimated on ``stats_hhat`` (nested
    Monte Carlo when ``p`` depends on Z).
    """

    name = "mixed"
    regime = CsiRegime.CELL_FREE_MIXED

    def __init__(self, err_cov, clusters, shared, stats_hhat):
        super().__init__(err_cov, clusters)
        L = self.err_cov.shape[0]
        self.shared = np.sort(np.asarray(shared, dtype=int))
        self.unshared = np.setdiff1d(np.arange(L), self.shared)
        self.stats_hhat = stats_hhat

    def powers(self, hhat, p):
        if callable(p):
            return np.asarray(p(hhat[:, self.shared]), dtype=float)
        return np.broadcast_to(_rows(p), (hhat.shape[0], hhat.shape[-1]))

    def conditional_pi(self, hhat, pz, lam=None, V=None):
        S, L, _, K = hhat.shape
        lam = _lam(lam, L)
        V = local_stages(hhat, self.err_cov, pz, lam) if V is None else V
        pi = np.zeros((S, L, K, K), dtype=complex)
        sh = self.shared
        if sh.size:
            pi[:, sh] = pi_samples(hhat[:, sh], self.err_cov[sh], pz, lam[sh], V[:, sh])
        un = self.unshared
        if un.size:
            hs, es, ls = self.stats_hhat[:, un], self.err_cov[un], lam[un]
            uniq, inv = np.unique(pz, axis=0, return_inverse=True)
            for i, row in enumerate(uniq):
                pi[np.flatnonzero(inv.ravel() == i)[:, None], un] = compute_pi_from(hs, es, row, ls).pi
        return pi

    def beamformers(self, hhat, p, lam=None):
        pz = self.powers(hhat, p)
        V = local_stages(hhat, self.err_cov, pz, lam)
        c = statistical_stages(self.conditional_pi(hhat, pz, lam, V), self.clusters)
        return V @ c


def assemble_mixed_tmmse(hhat, err_cov, clusters, shared, p, stats_hhat, lam=None):
    return MixedTeamMMSE(err_cov, clusters, shared, stats_hhat).beamformers(hhat, p, lam)


@dataclass(frozen=True)
class Residual:
    value: np.ndarray   # (L,), nan outside the cluster
    stderr: np.ndarray  # (L,)


def tmmse_residual(candidate, k, cov, cfg, p, outer=2000, inner=200, rng=None,
                   lam=None, cluster=None, chunk=16):
    """Monte Carlo check of the local team optimality conditions for user k.

    ``candidate`` maps estimates (S, L, N, K) to beamformers; each AP block must
    depend on that AP's own estimates only.  The inner conditional mean is
    estimated twice from independent halves of the nested draws and the squared
    norm is formed as Re(d1^H d2), which is unbiased for finite ``inner``.
    """
    if outer < 2 or inner < 2:
        raise ValueError("need at least 2 outer and 2 inner samples")
    stats = estimator_stats(cov, cfg)
    L, N, K = cov.shape
    cluster = np.arange(L) if cluster is None else np.sort(np.asarray(cluster, dtype=int))
    p = np.asarray(p, dtype=float)
    sp = np.sqrt(p)
    lam = _lam(lam, L)
    _, hout = simulate(cov, cfg, outer, rng, stats)
    vout = candidate(hout)[..., k]                       # (So, L, N)
    V = local_stages(hout, stats.err_cov, p, lam)        # (So, L, N, K)
    ek = np.zeros(K)
    ek[k] = 1.0
    half = inner // 2
    value = np.full(L, np.nan)
    stderr = np.full(L, np.nan)
    sizes = _mc.batch_sizes(outer)
    for l in cluster:
        others = [j for j in cluster if j != l]
        if not others:
            d = vout[:, l] - V[:, l, :, k]
            r = np.sum(np.abs(d) ** 2, axis=-1)
        else:
            r = np.empty(outer)
            for start in range(0, outer, chunk):
                idx = np.arange(start, min(start + chunk, outer))
                c = idx.size
                _, hin = simulate(cov, cfg, c * 2 * half, rng, stats)
                hin = hin.reshape(c, 2 * half, L, N, K)
                hin[:, :, l] = hout[idx, None, l]
                vin = candidate(hin.reshape(-1, L, N, K))[..., k].reshape(c, 2 * half, L, N)
                g = sum(np.einsum("cink,cin->cik", hin[:, :, j].conj(), vin[:, :, j]) for j in others) * sp
                m1 = g[:, :half].mean(axis=1)
                m2 = g[:, half:].mean(axis=1)
                Vl = V[idx, l]
                d1 = vout[idx, l] - np.einsum("cnk,ck->cn", Vl, ek - m1)
                d2 = vout[idx, l] - np.einsum("cnk,ck->cn", Vl, ek - m2)
                r[idx] = np.real(np.sum(d1.conj() * d2, axis=-1))
        value[l], stderr[l] = _mc.mean_stderr(_mc.batch_means(r, sizes), sizes)
    return Residual(value, stderr)
