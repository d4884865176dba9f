"""Monte Carlo estimation of MSE and of the hardening, coherent and optimistic rate bounds.

All schemes compared on one deployment are evaluated on the same frozen
:class:`Bank` of realizations.  Standard errors come from batch means; nonlinear
functions of moments (SINRs, MSE products) use the delete-one-batch jackknife so
paired differences between schemes get consistent errors.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _mc
from .pilots import estimator_stats, simulate

_CACHE_BYTES = 1 << 29


class Bank:
    """Channel realizations and estimates drawn batch by batch from counter-based streams."""

    def __init__(self, cov, cfg, samples, seed, batches=_mc.DEFAULT_BATCHES, cache=None):
        if samples < 2:
            raise ValueError("need at least 2 samples")
        self.cov = cov
        self.cfg = cfg
        self.seed = int(seed)
        self.stats = estimator_stats(cov, cfg)
        self.sizes = _mc.batch_sizes(samples, batches)
        self.offsets = np.concatenate(([0], np.cumsum(self.sizes)))
        L, N, K = cov.shape
        nbytes = 2 * 16 * samples * L * N * K
        self._cache = {} if (cache if cache is not None else nbytes <= _CACHE_BYTES) else None

    @property
    def samples(self):
        return int(self.offsets[-1])

    @property
    def err_cov(self):
        return self.stats.err_cov

    def __len__(self):
        return len(self.sizes)

    def batch(self, b):
        if self._cache is not None and b in self._cache:
            return self._cache[b]
        out = simulate(self.cov, self.cfg, int(self.sizes[b]), _mc.stream(self.seed, b), self.stats)
        if self._cache is not None:
            self._cache[b] = out
        return out

    def __iter__(self):
        for b in range(len(self)):
            yield self.batch(b)

    def estimates(self):
        """All estimates stacked, (S, L, N, K)."""
        return np.concatenate([self.batch(b)[1] for b in range(len(self))])

    def channels(self):
        return np.concatenate([self.batch(b)[0] for b in range(len(self))])


def error_quadratic(v, err_cov, isotropic=None):
    """q[s, j, k] = sum_l v_{l,k}^H C_{l,j} v_{l,k}."""
    if isotropic is None:
        n = err_cov.shape[-1]
        diag = np.einsum("lkii->lk", err_cov).real / n
        isotropic = np.allclose(err_cov, diag[..., None, None] * np.eye(n), atol=1e-15)
    if isotropic:
        diag = np.einsum("lkii->lk", err_cov).real / err_cov.shape[-1]
        return np.einsum("lj,slk->sjk", diag, np.sum(np.abs(v) ** 2, axis=2))
    return np.einsum("slnk,ljnm,slmk->sjk", v.conj(), err_cov, v).real


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=(den > 0) | (num != 0))
    return out


def _sinr_terms(G, gq, pg, norm):
    """Per-realization SINR with conditional second moments |G|^2 + gq."""
    pw = np.abs(G) ** 2 + (0 if gq is None else gq)
    sig = pg * np.abs(np.diagonal(G, axis1=-2, axis2=-1)) ** 2
    total = np.einsum("sj,sjk->sk", pg, pw)
    den = total - pg * np.diagonal(pw, axis1=-2, axis2=-1) + norm
    if gq is not None:
        den = den + pg * np.diagonal(gq, axis1=-2, axis2=-1)
    return _safe_ratio(sig, den)


@dataclass(frozen=True, eq=False)
class Estimate:
    value: np.ndarray
    stderr: np.ndarray
    loo: np.ndarray = field(repr=False)   # delete-one-batch replicates, (nb, ...)

    def __sub__(self, other):
        return Estimate(self.value - other.value, _jk_se(self.loo - other.loo), self.loo - other.loo)


def _jk_se(loo):
    nb = loo.shape[0]
    if nb < 2:
        return np.full(loo.shape[1:], np.inf)
    dev = loo - loo.mean(axis=0)
    return np.sqrt((nb - 1) / nb * np.sum(np.abs(dev) ** 2, axis=0))


def _loo_means(reps, sizes):
    """Delete-one-batch means from per-batch means."""
    shape = (-1,) + (1,) * (reps.ndim - 1)
    w = sizes.reshape(shape).astype(float)
    total = np.sum(reps * w, axis=0)
    n = sizes.sum()
    return (total[None] - reps * w) / (n - w)


def jackknife(fn, reps, sizes):
    """Apply ``fn`` to pooled means and to each delete-one-batch mean set."""
    means = {k: _mc.mean_stderr(v, sizes)[0] for k, v in reps.items()}
    value = fn(**means)
    if len(sizes) < 2:
        return Estimate(value, np.full(np.shape(value), np.inf), np.asarray(value)[None])
    loo = {k: _loo_means(v, sizes) for k, v in reps.items()}
    loo_vals = np.stack([fn(**{k: v[i] for k, v in loo.items()}) for i in range(len(sizes))])
    return Estimate(value, _jk_se(loo_vals), loo_vals)


@dataclass(frozen=True, eq=False)
class MomentSet:
    """Moments of g_{j,k} = sqrt(p_j) h_j^H v_k for one scheme and power vector.

    ``a``/``b`` hold E[h_j^H v_k] and E|h_j^H v_k|^2 without the power factor,
    ``mean_g``/``second_g`` include it, ``power_v`` is E||v_k||^2 weighted by 1 + lambda.
    Per-batch replicates are kept in ``reps`` for error propagation.
    """

    a: np.ndarray
    b: np.ndarray
    mean_g: np.ndarray
    second_g: np.ndarray
    power_v: np.ndarray
    samples: int
    reps: dict = field(repr=False)
    sizes: np.ndarray = field(repr=False)
    power_ap: np.ndarray = None   # (L, K): E||v_{l,k}||^2

    def stderr(self, name):
        return _mc.mean_stderr(self.reps[name], self.sizes)[1]

    @classmethod
    def from_reps(cls, reps, sizes):
        m = {k: _mc.mean_stderr(v, sizes)[0] for k, v in reps.items()}
        return cls(m["a"], m["b"], m["mean_g"], m["second_g"], m["power_v"], int(sizes.sum()), reps, sizes,
                   m.get("power_ap"))

    @classmethod
    def deterministic(cls, h, v, p, lam_weight=None):
        """Moments of a single fixed (h, v) pair; h and v are (M, K)."""
        G = np.conj(h).T @ v
        p = np.asarray(p, float)
        nv = np.sum(np.abs(v) ** 2 * (1 if lam_weight is None else lam_weight[:, None]), axis=0)
        reps = dict(a=G[None], b=(np.abs(G) ** 2)[None], mean_g=(np.sqrt(p)[:, None] * G)[None],
                    second_g=(p[:, None] * np.abs(G) ** 2)[None], power_v=nv[None])
        return cls.from_reps(reps, np.array([1]))


def _uatf(mean_g, second_g, power_v, **_):
    d = np.abs(np.diagonal(mean_g, axis1=-2, axis2=-1)) ** 2
    den = np.sum(second_g, axis=-2) - d + power_v
    return _safe_ratio(d, den)


def _mse(mean_g, second_g, power_v, **_):
    return np.sum(second_g, axis=-2) + power_v - 2 * np.real(np.diagonal(mean_g, axis1=-2, axis2=-1)) + 1


def uatf_sinr(m, k=None):
    """Hardening-bound SINR and rate (bits/symbol) from moments; all users if k is None."""
    s = _uatf(m.mean_g, m.second_g, m.power_v)
    s = s if k is None else s[k]
    return s, np.log2(1 + s)


def mse_from_moments(m):
    return _mse(m.mean_g, m.second_g, m.power_v)


@dataclass(frozen=True, eq=False)
class RateReport:
    mse: Estimate
    sinr_uatf: Estimate
    rate_uatf: Estimate
    rate_coh: Estimate
    rate_oer: Estimate
    moments: MomentSet = field(repr=False)
    meta: dict = field(default_factory=dict)

    def bound(self, name):
        return {"uatf": self.rate_uatf, "coh": self.rate_coh, "oer": self.rate_oer}[name]


def _powers_for(scheme, hhat, p, start):
    if hasattr(scheme, "powers"):
        return scheme.powers(hhat, p) if callable(p) else _slice_p(p, start, hhat.shape[0])
    return np.asarray(p(hhat), float) if callable(p) else _slice_p(p, start, hhat.shape[0])


def _slice_p(p, start, size):
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return p
    return p[start:start + size]


def _batch_terms(scheme, H, hhat, p, lam, err_cov, start, method, isotropic, bounds=True):
    S, L, N, K = hhat.shape
    pb = _powers_for(scheme, hhat, p, start)
    v = scheme.beamformers(hhat, pb, lam)
    pg = np.broadcast_to(np.asarray(pb, float), (S, K))
    lam = np.zeros(L) if lam is None else np.asarray(lam, float)
    per_ap = np.sum(np.abs(v) ** 2, axis=2)            # (S, L, K)
    norm = per_ap.sum(axis=1)
    norm_lam = np.einsum("l,slk->sk", 1 + lam, per_ap)
    Gh = np.conj(hhat.reshape(S, L * N, K)).swapaxes(1, 2) @ v.reshape(S, L * N, K)
    gq = error_quadratic(v, err_cov, isotropic)
    G = np.conj(H.reshape(S, L * N, K)).swapaxes(1, 2) @ v.reshape(S, L * N, K)
    out = {"power_ap": per_ap}
    if bounds:
        out["oer"] = np.log2(1 + _sinr_terms(G, None, pg, norm))
        out["coh"] = np.log2(1 + _sinr_terms(Gh, gq, pg, norm))
    if method == "raw":
        first, second = G, np.abs(G) ** 2
    else:
        first, second = Gh, np.abs(Gh) ** 2 + gq
    sp = np.sqrt(pg)
    out.update(a=first, b=second, mean_g=sp[:, :, None] * first, second_g=pg[:, :, None] * second,
               power_v=norm_lam, norm=norm)
    return out


def _accumulate(scheme, bank, p, lam, method, bounds):
    return _accumulate_many([(scheme, p, lam)], bank, method, bounds)[0]


def _accumulate_many(jobs, bank, method, bounds):
    """Per-batch means for several (scheme, p, lam) jobs in one pass over ``bank``."""
    if method not in ("raw", "estimate"):
        raise ValueError("method must be 'raw' or 'estimate'")
    iso = bool(bank.stats.isotropic)
    accs = [{} for _ in jobs]
    for b, (H, hhat) in enumerate(bank):
        for (scheme, p, lam), acc in zip(jobs, accs):
            terms = _batch_terms(scheme, H, hhat, p, lam, bank.err_cov, bank.offsets[b], method, iso, bounds)
            for key, val in terms.items():
                acc.setdefault(key, []).append(val.mean(axis=0))
    return [{k: np.stack(v) for k, v in acc.items()} for acc in accs]


_MOMENT_KEYS = ("a", "b", "mean_g", "second_g", "power_v", "power_ap")


def _report(reps, sizes, meta):
    moments = MomentSet.from_reps({k: reps[k] for k in _MOMENT_KEYS}, sizes)
    mreps = {k: reps[k] for k in ("mean_g", "second_g", "power_v")}
    sinr = jackknife(_uatf, mreps, sizes)
    rate = jackknife(lambda **m: np.log2(1 + _uatf(**m)), mreps, sizes)
    mse = jackknife(_mse, mreps, sizes)
    coh = jackknife(lambda coh: coh, {"coh": reps["coh"]}, sizes)
    oer = jackknife(lambda oer: oer, {"oer": reps["oer"]}, sizes)
    return RateReport(mse, sinr, rate, coh, oer, moments, dict(meta or {}))


def evaluate(scheme, bank, p, lam=None, method="raw", meta=None):
    """One pass over ``bank``: moments and all three bounds for ``scheme`` at powers ``p``.

    ``p`` may be a (K,) vector, a (S, K) array aligned with the bank, or a callable
    of the estimates (powers depending on the shared CSI).
    """
    return _report(_accumulate(scheme, bank, p, lam, method, True), bank.sizes, meta)


def evaluate_many(jobs, bank, method="raw"):
    """Reports for a list of (scheme, p) or (scheme, p, lam) on the same realizations.

    Equivalent to calling :func:`evaluate` per job but draws each batch once,
    which matters when the bank is too large to cache.
    """
    jobs = [tuple(j) + (None,) * (3 - len(j)) for j in jobs]
    return [_report(r, bank.sizes, None) for r in _accumulate_many(jobs, bank, method, True)]


def estimate_moments(scheme, p, bank, lam=None, method="raw"):
    """Moments only (skips the per-realization rate bounds)."""
    reps = _accumulate(scheme, bank, p, lam, method, False)
    return MomentSet.from_reps({k: reps[k] for k in _MOMENT_KEYS}, bank.sizes)


def mse_eval(scheme, p, bank, lam=None):
    return evaluate(scheme, bank, p, lam).mse


def coherent_rate(scheme, p, bank):
    return evaluate(scheme, bank, p).rate_coh


def optimistic_rate(scheme, p, bank):
    return evaluate(scheme, bank, p).rate_oer


def sinr_coherent(hhat, v, err_cov, p):
    """Per-realization coherent-bound SINR with the decoder knowing all pilots, (S, K)."""
    S, L, N, K = hhat.shape
    Gh = np.conj(hhat.reshape(S, L * N, K)).swapaxes(1, 2) @ v.reshape(S, L * N, K)
    norm = np.sum(np.abs(v) ** 2, axis=(1, 2))
    pg = np.broadcast_to(np.asarray(p, float), (S, K))
    return _sinr_terms(Gh, error_quadratic(v, err_cov), pg, norm)
