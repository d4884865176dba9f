import numpy as np
import pytest

from teammmse import _mc
from teammmse.beamform import CentralizedMMSE, LocalTeamMMSE, Scheme, local_stages
from teammmse.pilots import PilotConfig, simulate
from teammmse.rates import (Bank, Estimate, MomentSet, _mse, _uatf, evaluate, estimate_moments, jackknife,
                            mse_from_moments, sinr_coherent, uatf_sinr)

from conftest import scalar_cov, within


class Zero(Scheme):
    def beamformers(self, hhat, p, lam=None):
        return np.zeros_like(hhat)


class Fixed(Scheme):
    """Local team structure with externally supplied statistical stages."""

    def __init__(self, err_cov, c):
        super().__init__(err_cov, [np.arange(err_cov.shape[0])] * c.shape[-1])
        self.c = c

    def beamformers(self, hhat, p, lam=None):
        return local_stages(hhat, self.err_cov, p, lam) @ self.c


@pytest.fixture(scope="module")
def small():
    gains = np.array([[4.0, 0.5, 1.0], [0.8, 3.0, 0.4]])
    cov = scalar_cov(gains, 2)
    cfg = PilotConfig.build(np.array([0, 1, 0]), 2, 1.0)
    return cov, cfg


def test_deterministic_moments():
    e1 = np.array([[1.0 + 0j]])
    m = MomentSet.deterministic(e1, e1, [4.0])
    assert m.mean_g[0, 0] == pytest.approx(2.0)
    assert m.second_g[0, 0] == pytest.approx(4.0)
    sinr, rate = uatf_sinr(m)
    assert sinr[0] == pytest.approx(4.0)
    assert rate[0] == pytest.approx(np.log2(5))
    assert rate[0] == pytest.approx(2.3219, abs=1e-4)


def test_zero_beamformer():
    h = np.array([[0.3 + 1j], [2.0 + 0j]])
    m = MomentSet.deterministic(h, np.zeros((2, 1)), [1.0])
    assert np.all(m.mean_g == 0) and np.all(m.second_g == 0) and np.all(m.power_v == 0)
    assert mse_from_moments(m)[0] == 1.0
    assert uatf_sinr(m)[0][0] == 0.0


def test_perfect_csi_mse():
    h = np.array([[0.3 + 1j], [2.0 - 0.5j]])
    v = h / (1 + np.sum(np.abs(h) ** 2))
    m = MomentSet.deterministic(h, v, [1.0])
    assert mse_from_moments(m)[0] == pytest.approx(1 / (1 + np.sum(np.abs(h) ** 2)))


def test_scaled_moments_consistency():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    v = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    p = np.array([1.0, 2.0])
    c = 1.7
    m1 = MomentSet.deterministic(h, v, p)
    m2 = MomentSet.deterministic(h, c * v, p)
    np.testing.assert_allclose(m2.mean_g, c * m1.mean_g)
    np.testing.assert_allclose(m2.second_g, c ** 2 * m1.second_g)
    # SINR from scaled moments: numerator and interference scale by c^2, noise term too
    s1 = uatf_sinr(m1)[0]
    d = np.abs(np.diagonal(m1.mean_g)) ** 2
    interf = m1.second_g.sum(axis=0) - d
    np.testing.assert_allclose(uatf_sinr(m2)[0], c ** 2 * d / (c ** 2 * interf + c ** 2 * m1.power_v))
    np.testing.assert_allclose(uatf_sinr(m2)[0], s1)


def test_zero_beamformer_rates(small):
    cov, cfg = small
    bank = Bank(cov, cfg, 200, 1, batches=10)
    rep = evaluate(Zero(bank.err_cov, [[0, 1]] * 3), bank, np.ones(3))
    assert np.all(rep.mse.value == 1.0)
    for b in ("uatf", "coh", "oer"):
        assert np.all(rep.bound(b).value == 0.0)


def test_raw_and_estimate_moments_agree(small):
    cov, cfg = small
    bank = Bank(cov, cfg, 20_000, 2)
    scheme = CentralizedMMSE(bank.err_cov, [np.arange(2)] * 3)
    p = np.array([1.0, 2.0, 0.5])
    raw = estimate_moments(scheme, p, bank, method="raw")
    est = estimate_moments(scheme, p, bank, method="estimate")
    for name in ("mean_g", "second_g"):
        se = np.hypot(raw.stderr(name), est.stderr(name))
        d = getattr(raw, name) - getattr(est, name)
        assert within(d.real, se)
        assert within(d.imag, se)
    with pytest.raises(ValueError):
        estimate_moments(scheme, p, bank, method="bogus")


def test_bound_ordering_and_identity(small):
    cov, cfg = small
    bank = Bank(cov, cfg, 20_000, 3)
    rep = evaluate(CentralizedMMSE(bank.err_cov, [np.arange(2)] * 3), bank, np.ones(3))
    u, c, o = rep.rate_uatf, rep.rate_coh, rep.rate_oer
    assert np.all(u.value <= c.value + 3 * np.hypot(u.stderr, c.stderr))
    assert np.all(c.value <= o.value + 3 * np.hypot(c.stderr, o.stderr))
    reps = {k: rep.moments.reps[k] for k in ("mean_g", "second_g", "power_v")}
    prod = jackknife(lambda **m: (1 + _uatf(**m)) * _mse(**m), reps, bank.sizes)
    assert within(prod.value - 1, prod.stderr)


def test_coherent_approaches_optimistic_with_strong_pilots():
    gains = np.array([[2.0, 0.5], [0.3, 1.5]])
    cov = scalar_cov(gains, 2)
    cfg = PilotConfig.build(np.array([0, 1]), 2, 1e9)
    bank = Bank(cov, cfg, 5000, 4, batches=50)
    rep = evaluate(CentralizedMMSE(bank.err_cov, [np.arange(2)] * 2), bank, np.ones(2))
    d = rep.rate_oer - rep.rate_coh
    assert np.all(np.abs(d.value) <= 3 * d.stderr + 1e-6)


def test_coherent_equals_optimistic_deterministic():
    rng = np.random.default_rng(5)
    h = rng.standard_normal((1, 2, 1, 3)) + 1j * rng.standard_normal((1, 2, 1, 3))
    err = np.zeros((2, 3, 1, 1))
    v = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
    p = np.array([1.0, 0.5, 2.0])
    s = sinr_coherent(h, v, err, p)
    G = h.reshape(2, 3).conj().T @ v.reshape(2, 3)
    num = p * np.abs(np.diag(G)) ** 2
    den = (p[:, None] * np.abs(G) ** 2).sum(axis=0) - num + np.sum(np.abs(v) ** 2, axis=(1, 2))[0]
    np.testing.assert_allclose(s[0], num / den)


def test_evaluate_deterministic(small):
    cov, cfg = small
    scheme = CentralizedMMSE(np.zeros((2, 3, 2, 2)), [np.arange(2)] * 3)
    reps = []
    for cache in (True, False):
        bank = Bank(cov, cfg, 500, 9, batches=10, cache=cache)
        scheme.err_cov = bank.err_cov
        reps.append(evaluate(scheme, bank, np.ones(3)))
    for b in ("uatf", "coh", "oer"):
        assert reps[0].bound(b).value.tobytes() == reps[1].bound(b).value.tobytes()
        assert reps[0].bound(b).stderr.tobytes() == reps[1].bound(b).stderr.tobytes()


def test_bank_batches(small):
    cov, cfg = small
    bank = Bank(cov, cfg, 1003, 1, batches=10)
    assert bank.sizes.sum() == 1003 and len(bank) == 10
    assert bank.estimates().shape == (1003, 2, 2, 3)
    np.testing.assert_array_equal(bank.batch(3)[1], bank.batch(3)[1])
    with pytest.raises(ValueError):
        Bank(cov, cfg, 1, 1)


def test_jackknife_of_mean_matches_batch_se():
    x = np.random.default_rng(6).standard_normal((20, 3))
    sizes = np.full(20, 7)
    est = jackknife(lambda x: x, {"x": x}, sizes)
    mean, se = _mc.mean_stderr(x, sizes)
    np.testing.assert_allclose(est.value, mean)
    np.testing.assert_allclose(est.stderr, se)


def test_estimate_difference():
    loo_a = np.array([[1.0], [2.0], [3.0]])
    loo_b = loo_a + 0.5
    d = Estimate(np.array([2.0]), np.array([0.1]), loo_a) - Estimate(np.array([2.5]), np.array([0.1]), loo_b)
    assert d.value[0] == -0.5
    assert d.stderr[0] == 0.0


def test_statistical_stage_first_order_optimal(small):
    cov, cfg = small
    K = 3
    p = np.ones(K)
    _, stats = simulate(cov, cfg, 100_000, _mc.stream(7))
    bank = Bank(cov, cfg, 10_000, 8, batches=50)
    team = LocalTeamMMSE(bank.err_cov, [np.arange(2)] * K, stats)
    c = team.stages(p)
    base = evaluate(Fixed(bank.err_cov, c), bank, p).mse
    rng = np.random.default_rng(9)
    for _ in range(20):
        d = rng.standard_normal(c.shape) + 1j * rng.standard_normal(c.shape)
        d *= 1e-3 / np.linalg.norm(d)
        diff = evaluate(Fixed(bank.err_cov, c + d), bank, p).mse - base
        assert np.all(diff.value >= -3 * diff.stderr)
