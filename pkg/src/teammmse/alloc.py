"""Power control: fractional policies and fixed-point max-min solvers.

The max-min solvers treat expectations as averages over a frozen :class:`Bank`
(and, for local team schemes, a frozen statistics bank), so each iteration sees
the same random numbers and the fixed point is well defined.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .beamform import centralized_mmse
from .duality import build_coupling, downlink_sinr, solve_power_pair
from .errors import ConvergenceError, InfeasibleError, SingularSystemError
from .rates import _uatf, estimate_moments, sinr_coherent

log = logging.getLogger(__name__)


@dataclass
class SolverOptions:
    tol: float = 1e-7
    max_iter: int = 1000
    lam_step: float = 1e-2
    lam_iter: int = 300
    bisect_tol: float = 1e-5
    power_tol: float = 1e-6       # absolute slack on per-AP budgets
    slackness_tol: float = 1e-4   # relative to P_l
    diverge_cap: float = 1e6
    method: str = "raw"
    accelerate: bool = True       # jump to the frozen-beamformer fixed point each step
    trace_path: str = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1 or self.lam_iter < 1:
            raise ValueError("iteration limits must be >= 1")


def _write_trace(path, rows, header=("iteration", "min_sinr", "p_norm")):
    if not path:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def fractional_power(deployment, P, direction="ul", clusters=None):
    """Statistical power inversely proportional to the aggregate cluster gain."""
    gains = deployment.gains
    clusters = deployment.clusters if clusters is None else clusters
    agg = np.array([gains[np.asarray(c, dtype=int), k].sum() for k, c in enumerate(clusters)])
    if np.any(agg <= 0):
        raise ValueError("zero aggregate gain in a user's cluster")
    inv = 1.0 / agg
    if direction == "ul":
        return P * inv / inv.max()
    if direction == "dl":
        return len(agg) * P * inv / inv.sum()
    raise ValueError("direction must be 'ul' or 'dl'")


def _pnorm(t, norm):
    return np.max(np.abs(t), axis=-1) if norm in ("inf", np.inf) else np.sum(np.abs(t), axis=-1)


@dataclass
class MaxMinResult:
    p: np.ndarray
    sinr: np.ndarray
    iterations: int
    moments: object = field(default=None, repr=False)
    trace: list = field(default_factory=list, repr=False)

    @property
    def min_sinr(self):
        return float(np.min(self.sinr))


def maxmin_uatf(scheme, bank, P, norm="inf", opts=None, lam=None, p0=None):
    """Normalized fixed point p <- P t / ||t||, t_k = p_k / SINR_k, on a frozen bank.

    ``norm="inf"`` solves the per-user budget problem; ``norm="1"`` the sum-power
    dual of the downlink problem.
    """
    opts = opts or SolverOptions()
    if not P > 0:
        raise ValueError("P must be positive")
    K = bank.cov.shape[2]
    p = np.full(K, float(P)) if p0 is None else np.asarray(p0, float)
    p = P * p / _pnorm(p, norm)
    trace = []
    for it in range(1, opts.max_iter + 1):
        m = estimate_moments(scheme, p, bank, lam, opts.method)
        sinr = _uatf(m.mean_g, m.second_g, m.power_v)
        trace.append((it, float(sinr.min()), float(_pnorm(p, norm))))
        if np.any(sinr <= 0):
            raise InfeasibleError("a user has zero SINR", index=int(np.argmin(sinr)))
        t = p / sinr
        p_new = P * t / _pnorm(t, norm)
        change = np.max(np.abs(p_new - p) / p_new)
        p = p_new
        if change < opts.tol:
            break
    else:
        _write_trace(opts.trace_path, trace)
        raise ConvergenceError("max-min fixed point did not converge", last=p)
    m = estimate_moments(scheme, p, bank, lam, opts.method)
    sinr = _uatf(m.mean_g, m.second_g, m.power_v)
    trace.append((it + 1, float(sinr.min()), float(_pnorm(p, norm))))
    _write_trace(opts.trace_path, trace)
    return MaxMinResult(p, sinr, it, m, trace)


def maxmin_coh_instantaneous(hhat, err_cov, clusters, P, opts=None):
    """Per-realization max-min of the coherent-bound SINR with centralized MMSE beamformers.

    Returns (v, p, sinr) with shapes (S, L, N, K), (S, K), (S, K).
    """
    opts = opts or SolverOptions()
    S, L, N, K = hhat.shape
    p = np.full((S, K), float(P))
    active = np.arange(S)
    v = np.zeros_like(hhat)
    sinr = np.zeros((S, K))
    for _ in range(opts.max_iter):
        h = hhat[active]
        pa = p[active]
        va = centralized_mmse(h, err_cov, pa, clusters)
        s = sinr_coherent(h, va, err_cov, pa)
        bad = np.flatnonzero(np.any(s <= 0, axis=1))
        if bad.size:
            raise InfeasibleError("a user has zero SINR", index=int(active[bad[0]]))
        v[active], sinr[active] = va, s
        t = pa / s
        p_new = P * t / t.max(axis=1, keepdims=True)
        change = np.max(np.abs(p_new - pa) / p_new, axis=1)
        p[active] = p_new
        active = active[change >= opts.tol]
        if active.size == 0:
            break
    else:
        raise ConvergenceError("instantaneous max-min did not converge", last=p, index=int(active[0]))
    v = centralized_mmse(hhat, err_cov, p, clusters)
    return v, p, sinr_coherent(hhat, v, err_cov, p)


@dataclass
class FeasibilityResult:
    p: np.ndarray
    moments: object = field(repr=False)
    iterations: int = 0


def pertx_feasibility(scheme, bank, gamma, lam, opts=None, p0=None):
    """Un-normalized fixed point p <- gamma p / SINR~ with lambda-augmented noise.

    With ``opts.accelerate`` each step solves the linear power system for the
    current beamformers exactly (the limit of the plain iteration with frozen
    beamformers) and falls back to the plain step when that system is infeasible.
    Raises :class:`InfeasibleError` when the iterates grow past the divergence cap.
    """
    opts = opts or SolverOptions()
    K = bank.cov.shape[2]
    gamma = np.broadcast_to(np.asarray(gamma, float), (K,))
    if np.all(gamma == 0):
        return FeasibilityResult(np.zeros(K), estimate_moments(scheme, np.zeros(K), bank, lam, opts.method))
    p = np.ones(K) if p0 is None else np.where(gamma > 0, np.maximum(np.asarray(p0, float), 1e-300), 0.0)
    cap = None
    for it in range(1, opts.max_iter + 1):
        m = estimate_moments(scheme, p, bank, lam, opts.method)
        if cap is None:
            d = np.abs(np.diagonal(m.a)) ** 2
            scale = np.median(d[d > 0] / m.power_v[d > 0]) if np.any(d > 0) else 1.0
            cap = opts.diverge_cap * max(gamma.max(), 1.0) / scale
        sinr = _uatf(m.mean_g, m.second_g, m.power_v)
        if np.any((sinr <= 0) & (gamma > 0)):
            raise InfeasibleError("a user with a positive target has zero SINR")
        p_new = None
        if opts.accelerate:
            # limit of the plain iteration with the current beamformers frozen
            try:
                p_new = solve_power_pair(build_coupling(m, gamma))[0]
            except (InfeasibleError, SingularSystemError):
                p_new = None
        if p_new is None:
            p_new = np.where(gamma > 0, gamma * p / np.where(sinr > 0, sinr, 1.0), 0.0)
        if p_new.max() > cap:
            raise InfeasibleError("power iteration diverged", rho=None)
        change = np.max(np.abs(p_new - p)) / p_new.max()
        p = p_new
        if change < opts.tol:
            return FeasibilityResult(p, m, it)
    raise ConvergenceError("per-transmitter feasibility iteration did not converge", last=p)


@dataclass
class PerTxResult:
    p_dl: np.ndarray
    p_ul: np.ndarray
    lam: np.ndarray
    gamma: float
    used: np.ndarray
    sinr: np.ndarray
    moments: object = field(repr=False)
    probes: int = 0

    @property
    def min_sinr(self):
        return float(np.min(self.sinr))

    def slackness(self, budgets):
        return np.abs(self.lam * (np.asarray(budgets, float) - self.used))


def _probe(scheme, bank, gamma, budgets, lam, p0, opts, total):
    """Projected-gradient ascent on lambda for one target; returns a state or None."""
    L = len(budgets)
    step = np.full(L, opts.lam_step)
    prev = np.zeros(L)
    p = p0
    for _ in range(opts.lam_iter):
        try:
            fr = pertx_feasibility(scheme, bank, gamma, lam, opts, p)
            C = build_coupling(fr.moments, gamma)
            p_ul, p_dl = solve_power_pair(C)
        except (InfeasibleError, ConvergenceError):
            return None
        p = fr.p
        used = fr.moments.power_ap @ p_dl
        # weak duality: the dual value bounds the least total power from below
        if p_ul.sum() - lam @ budgets > total * (1 + 1e-9):
            return None
        ok = np.all(used <= budgets + opts.power_tol)
        cs = np.abs(lam * (budgets - used)) <= opts.slackness_tol * budgets
        if ok and np.all(cs):
            return dict(lam=lam.copy(), p=p, p_ul=p_ul, p_dl=p_dl, used=used, C=C, moments=fr.moments)
        g = (used - budgets) / budgets
        sign = np.sign(g)
        step = np.where(sign * prev < 0, step / 2, np.where(sign == prev, step * 2, step))
        prev = sign
        lam = np.maximum(0.0, lam + step * g)
        # an AP pinned at zero restarts from the base step
        step = np.where(lam == 0, opts.lam_step, step)
    return None


def pertx_maxmin(scheme, bank, budgets, opts=None):
    """Max-min downlink hardening SINR under per-AP power budgets.

    Bisection on a common target; each probe tunes lambda by projected gradient
    around :func:`pertx_feasibility` and recovers downlink powers by duality.  The
    accepted powers are finally scaled so the tightest AP meets its budget.
    """
    opts = opts or SolverOptions()
    budgets = np.asarray(budgets, float)
    if np.any(budgets <= 0):
        raise ValueError("per-AP budgets must be positive")
    total = budgets.sum()
    K = bank.cov.shape[2]
    hi = maxmin_uatf(scheme, bank, total, norm="1", opts=opts).min_sinr * (1 + 1e-6)
    lo = 0.0
    lam = np.zeros(len(budgets))
    p = None
    best = None
    probes = 0
    trace = []
    while hi - lo > opts.bisect_tol * hi:
        mid = 0.5 * (lo + hi)
        probes += 1
        state = _probe(scheme, bank, np.full(K, mid), budgets, lam, p, opts, total)
        trace.append((probes, mid, int(state is not None)))
        if state is None:
            hi = mid
        else:
            lo, best = mid, state
            lam, p = state["lam"], state["p"]
        if probes > 200:
            break
    _write_trace(opts.trace_path, trace, ("probe", "target", "accepted"))
    if best is None:
        raise ConvergenceError("bisection found no feasible target")
    scale = np.min(budgets / np.where(best["used"] > 0, best["used"], np.inf))
    p_dl = best["p_dl"] * scale
    used = best["used"] * scale
    sinr = downlink_sinr(best["C"], p_dl)
    return PerTxResult(p_dl, best["p_ul"], best["lam"], lo, used, sinr, best["moments"], probes)
