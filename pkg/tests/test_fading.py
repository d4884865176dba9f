import numpy as np
import pytest

from teammmse import _mc
from teammmse.errors import FactorizationError
from teammmse.fading import CovarianceSet, build_covariances, hermitian_sqrt, sample_channel

from conftest import scalar_cov, within


def test_identity_and_scaling():
    cov = build_covariances(np.array([[1.0, 0.5]]), antennas=2)
    np.testing.assert_array_equal(cov.R[0, 0], np.eye(2))
    np.testing.assert_array_equal(cov.R[0, 1], 0.5 * np.eye(2))
    assert cov.is_isotropic


def test_trace_is_n_beta():
    gains = np.random.default_rng(0).uniform(0.1, 3, (3, 4))
    cov = build_covariances(gains, antennas=5)
    np.testing.assert_allclose(np.einsum("lkii->lk", cov.R).real, 5 * gains)


def test_zero_covariance_gives_zero():
    h = sample_channel(scalar_cov(np.zeros((2, 3)), 2), _mc.stream(0), 10)
    assert np.all(h == 0)


def _random_cov(rng, L, K, N):
    A = rng.standard_normal((L, K, N, N)) + 1j * rng.standard_normal((L, K, N, N))
    return CovarianceSet(A @ np.conj(np.swapaxes(A, -1, -2)) / N)


def test_hermitian_sqrt_squares_back():
    cov = _random_cov(np.random.default_rng(1), 2, 2, 3)
    S = cov.sqrt
    np.testing.assert_allclose(S @ S, cov.R, atol=1e-10)
    np.testing.assert_allclose(S, np.conj(np.swapaxes(S, -1, -2)), atol=1e-12)


def test_hermitian_sqrt_rejects_indefinite():
    with pytest.raises(FactorizationError):
        hermitian_sqrt(np.diag([1.0, -1.0]).astype(complex))


def test_unit_variance():
    n = 100_000
    h = sample_channel(scalar_cov(np.ones((1, 1)), 1), _mc.stream(2), n).ravel()
    x = np.abs(h) ** 2
    assert within(x.mean() - 1.0, x.std(ddof=1) / np.sqrt(n))


@pytest.mark.parametrize("isotropic", [True, False])
def test_covariance_and_circularity(isotropic):
    rng = np.random.default_rng(3)
    cov = scalar_cov([[2.0]], 2) if isotropic else _random_cov(rng, 1, 1, 2)
    n = 100_000
    h = sample_channel(cov, _mc.stream(4), n)[:, 0, :, 0]         # (n, N)
    outer = h[:, :, None] * h[:, None, :].conj()
    for stat, target in ((outer, cov.R[0, 0]), (h[:, :, None] * h[:, None, :], 0.0)):
        emp = stat.mean(axis=0)
        se_re = stat.real.std(axis=0, ddof=1) / np.sqrt(n)
        se_im = stat.imag.std(axis=0, ddof=1) / np.sqrt(n)
        diff = emp - target
        assert within(diff.real, se_re + 1e-15) and within(diff.imag, se_im + 1e-15)


def test_links_independent():
    n = 100_000
    h = sample_channel(scalar_cov(np.ones((2, 2)), 1), _mc.stream(5), n)[:, :, 0, :].reshape(n, 4)
    cross = h[:, 0] * h[:, 3].conj()
    se = np.hypot(cross.real.std(ddof=1), cross.imag.std(ddof=1)) / np.sqrt(n)
    assert abs(cross.mean()) <= 3 * se * np.sqrt(2)


def test_shapes():
    cov = scalar_cov(np.ones((3, 4)), 2)
    assert cov.shape == (3, 2, 4)
    assert sample_channel(cov, _mc.stream(0)).shape == (3, 2, 4)
    assert sample_channel(cov, _mc.stream(0), 5).shape == (5, 3, 2, 4)


def test_rejects_bad_shape():
    with pytest.raises(ValueError):
        CovarianceSet(np.ones((2, 2, 2)))
