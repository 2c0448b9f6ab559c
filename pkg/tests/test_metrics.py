import math

import numpy as np
import pytest
from scipy import stats
from skimage.metrics import structural_similarity

from flatrecon import autodiff as ad
from flatrecon.autodiff import ConfigError, ShapeError
from flatrecon.metrics import betainc, psnr, ssim, ssim_loss, ssim_loss_var, unpaired_t_test


def loop_ssim(x, y, win=7, k1=0.01, k2=0.03, L=1.0):
    """Window-by-window SSIM written directly from the definition."""
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            a = x[i:i + win, j:j + win].ravel()
            b = y[i:i + win, j:j + win].ravel()
            ma, mb = a.mean(), b.mean()
            va, vb = a.var(ddof=1), b.var(ddof=1)
            cab = np.sum((a - ma) * (b - mb)) / (a.size - 1)
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def image_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        h, w = rng.choice([8, 16, 32], size=2)
        x = rng.uniform(size=(h, w))
        yield x, np.clip(x + rng.normal(scale=rng.uniform(0.01, 0.5), size=(h, w)), 0, 1)


# PSNR


def test_psnr_cases():
    a = np.zeros((5, 7))
    assert psnr(a, a) == 100.0
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-10
    assert abs(psnr(np.zeros((64, 64)), np.full((64, 64), 0.1)) - 20.0) < 1e-10
    b = np.zeros(100)
    b[:1] = 1.0  # MSE 0.01
    assert abs(psnr(np.zeros(100), b) - 20.0) < 1e-10
    assert abs(psnr(a, a + 0.2, data_range=2.0) - 20.0) < 1e-10
    assert psnr(a, a + 1e-60) == 100.0


def test_psnr_errors():
    with pytest.raises(ConfigError):
        psnr(np.zeros(3), np.zeros(3), data_range=0)
    with pytest.raises(ShapeError):
        psnr(np.zeros(3), np.zeros(4))


def test_psnr_pixel_permutation_invariant():
    x, y = next(image_pairs(1, 3))
    perm = np.random.default_rng(4).permutation(x.size)
    assert psnr(x, y) == pytest.approx(psnr(x.ravel()[perm], y.ravel()[perm]), abs=1e-12)


# SSIM


def test_ssim_identity_and_symmetry():
    x, y = next(image_pairs(1, 1))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(x, y) - ssim(y, x)) < 1e-12


def test_ssim_inverted_binary_image():
    x = (np.random.default_rng(2).uniform(size=(32, 32)) > 0.5).astype(float)
    assert ssim(x, 1 - x) < 0.2


def test_ssim_window_too_large():
    with pytest.raises(ShapeError):
        ssim(np.zeros((6, 16)), np.zeros((6, 16)))


def test_ssim_matches_loop_reference():
    for x, y in image_pairs(20, 5):
        assert abs(ssim(x, y) - loop_ssim(x, y)) < 1e-6


def test_ssim_matches_scikit_image():
    for x, y in image_pairs(20, 6):
        ref = structural_similarity(x, y, win_size=7, data_range=1.0, gaussian_weights=False)
        assert abs(ssim(x, y) - ref) < 1e-6


def test_ssim_loss_range_and_zero():
    for x, y in image_pairs(10, 7):
        assert 0.0 <= ssim_loss(x, y) <= 2.0
        assert abs(ssim_loss(x, x)) < 1e-12


def test_ssim_loss_gradient():
    rng = np.random.default_rng(8)
    ref = rng.uniform(size=(1, 16, 16))
    test = rng.uniform(size=(1, 16, 16))
    tape = ad.Tape()
    v = tape.param(test)
    loss = ssim_loss_var(tape.const(ref), v)
    ad.backward(tape, loss)
    h = 1e-6
    fd = np.zeros_like(test)
    for idx in np.ndindex(test.shape):
        e = np.zeros_like(test)
        e[idx] = h
        fd[idx] = (ssim_loss(ref[0], (test + e)[0]) - ssim_loss(ref[0], (test - e)[0])) / (2 * h)
    assert np.linalg.norm(v.grad - fd) / np.linalg.norm(fd) < 1e-4


# t-test


CANNED = [
    ([1.0, 2.0, 3.0, 4.0], [2.0, 3.0, 4.0, 5.0]),
    ([0.0, 0.01, -0.01, 0.005], [1.0, 1.002, 0.998, 1.001]),
    ([33.1, 33.6, 32.9, 34.0, 33.3], [32.0, 32.4, 31.8, 32.9]),
    ([5.0, 5.1], [4.9, 5.3]),
    (list(np.linspace(0, 1, 40)), list(np.linspace(0.1, 1.1, 40))),
    ([10.0, 12.0, 9.0, 11.0, 13.0, 8.0], [10.5, 11.5, 9.5, 10.0]),
    ([1e-3, 2e-3, 1.5e-3], [1.1e-3, 2.1e-3, 1.4e-3]),
    ([100.0, 101.0, 99.0], [50.0, 51.0, 49.5]),
    (list(np.random.default_rng(0).normal(0, 1, 25)), list(np.random.default_rng(1).normal(0.3, 1, 30))),
    ([2.0, 2.0, 2.0, 2.1], [2.0, 2.05, 1.95, 2.0, 2.02]),
]


@pytest.mark.parametrize("a,b", CANNED)
def test_t_test_matches_scipy(a, b):
    ours = unpaired_t_test(a, b)
    ref = stats.ttest_ind(a, b, equal_var=True)
    assert abs(ours.t - ref.statistic) < 1e-9 * max(1.0, abs(ref.statistic))
    assert abs(ours.p - ref.pvalue) < 1e-6
    assert ours.significant == (ref.pvalue < 0.05)


def test_t_test_conventions():
    r = unpaired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.t == 0.0 and r.p == pytest.approx(1.0) and not r.significant
    r = unpaired_t_test([4.0, 4.0], [4.0, 4.0])
    assert (r.t, r.p, r.significant) == (0.0, 1.0, False)
    jit = [0.0, 1e-3, -1e-3, 5e-4]
    assert unpaired_t_test(jit, [1 + j for j in jit[::-1]]).p < 1e-3
    a, b = CANNED[2]
    ab, ba = unpaired_t_test(a, b), unpaired_t_test(b, a)
    assert ab.t == -ba.t and ab.p == ba.p
    with pytest.raises(ValueError):
        unpaired_t_test([1.0], [1.0, 2.0])


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.9), (10.0, 0.5, 0.99), (30.0, 0.5, 0.2)])
def test_betainc_matches_scipy(a, b, x):
    from scipy.special import betainc as ref
    assert abs(betainc(a, b, x) - ref(a, b, x)) < 1e-12
    assert betainc(a, b, 0.0) == 0.0 and betainc(a, b, 1.0) == 1.0
    assert not math.isnan(betainc(a, b, x))
