import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import wilcoxon as scipy_wilcoxon

from aniso_sr.metrics import InsufficientPairsError, psnr, ssim, vif, wilcoxon_one_sided
from aniso_sr.metrics.quality import filter_valid, gaussian_kernel1d, vif_scales
from aniso_sr.metrics.wilcoxon import exact_upper_tail, signed_ranks
from aniso_sr.volume_io import DegenerateInputError, Slice, VolumeShapeError
from oracles import enumerate_upper_tail, ssim_reference, vif_reference


def _smooth_image(rng, size=64):
    img = rng.random((size // 8, size // 8))
    big = np.kron(img, np.ones((8, 8)))
    k = gaussian_kernel1d(9, 2.0)
    padded = np.pad(big, 4, mode="edge")
    return (filter_valid(padded, k) * 0.8 + 0.1).clip(0, 1)


# -- PSNR ----------------------------------------------------------------


def test_psnr_uniform_error_is_20db():
    x = np.full((8, 8), 0.5)
    assert abs(psnr(x, x + 0.1) - 20.0) < 1e-9


def test_psnr_identity_is_infinite():
    x = np.random.default_rng(0).random((4, 4))
    assert psnr(x, x) == math.inf


def test_psnr_accepts_slices_and_checks_shapes():
    a = Slice(np.zeros((4, 4)))
    assert psnr(a, Slice(np.full((4, 4), 0.01))) == pytest.approx(40.0)
    with pytest.raises(VolumeShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# -- SSIM ----------------------------------------------------------------


def test_ssim_identity():
    x = np.random.default_rng(1).random((32, 32))
    assert abs(ssim(x, x) - 1.0) < 1e-9


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    a, b = rng.random((24, 24)), rng.random((24, 24))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= ssim(a, b) < 1.0


def test_ssim_constant_images():
    # luminance term only: (2*0.2*0.4 + c1) / (0.2^2 + 0.4^2 + c1)
    c1 = 1e-4
    expected = (2 * 0.2 * 0.4 + c1) / (0.04 + 0.16 + c1)
    assert ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.4)) == pytest.approx(expected, rel=1e-12)


def test_ssim_too_small():
    with pytest.raises(VolumeShapeError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ssim_matches_direct_reference():
    rng = np.random.default_rng(3)
    a = rng.random((20, 18))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_reference(a, b)) < 1e-9


# -- VIF ----------------------------------------------------------------


def test_vif_scales_recipe():
    assert vif_scales() == [(17, 3.4), (9, 1.8), (5, 1.0), (3, 0.6)]


def test_vif_identity():
    x = _smooth_image(np.random.default_rng(4))
    assert abs(vif(x, x) - 1.0) < 1e-6


def test_vif_decreases_with_noise():
    rng = np.random.default_rng(5)
    x = _smooth_image(rng)
    mild = np.clip(x + rng.normal(0, 0.02, x.shape), 0, 1)
    strong = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
    assert 0.0 < vif(x, strong) < vif(x, mild) < 1.0


def test_vif_contrast_gain_exceeds_one():
    x = _smooth_image(np.random.default_rng(6))
    boosted = 0.5 + 1.2 * (x - 0.5)
    assert vif(x, boosted) > 1.0


def test_vif_constant_reference_degenerate():
    with pytest.raises(DegenerateInputError):
        vif(np.full((64, 64), 0.3), np.random.default_rng(7).random((64, 64)))


def test_vif_too_small():
    with pytest.raises(VolumeShapeError):
        vif(np.zeros((30, 30)), np.zeros((30, 30)))


def test_vif_matches_direct_reference():
    rng = np.random.default_rng(8)
    a = _smooth_image(rng, 48)
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert abs(vif(a, b) - vif_reference(a, b)) < 1e-9


# -- Wilcoxon ----------------------------------------------------------------


def test_uniform_improvement_n6_is_one_over_64():
    a = [0.9, 0.8, 0.85, 0.7, 0.95, 0.75]
    b = [x - 0.01 * (k + 1) for k, x in enumerate(a)]
    assert wilcoxon_one_sided(a, b) == 1.0 / 64


def test_all_worse_gives_one():
    a = np.arange(6.0)
    assert wilcoxon_one_sided(a, a + 1.0) == 1.0


def test_less_alternative_mirrors_greater():
    rng = np.random.default_rng(9)
    a, b = rng.random(9), rng.random(9)
    assert wilcoxon_one_sided(a, b, "less") == wilcoxon_one_sided(b, a, "greater")


def test_zero_differences_dropped():
    ranks, signs = signed_ranks([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(ranks, [1.0, 2.0])
    np.testing.assert_array_equal(signs, [1.0, 1.0])


def test_degenerate_and_insufficient():
    with pytest.raises(DegenerateInputError):
        wilcoxon_one_sided([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(InsufficientPairsError):
        wilcoxon_one_sided([1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0])


def test_exact_tail_with_ties_matches_enumeration():
    ranks = [1.5, 1.5, 3.0, 4.5, 4.5, 6.0]
    for observed in (0.0, 7.5, 12.0, 21.0):
        doubled = [int(2 * r) for r in ranks]
        assert exact_upper_tail(doubled, int(2 * observed)) == enumerate_upper_tail(ranks, observed)


def test_exact_tail_is_exact_rational():
    # 2**-n multiples are representable, so the float equals the fraction
    p = exact_upper_tail([2, 4, 6, 8, 10], 20)
    assert Fraction(p) == Fraction(sum(1 for m in range(32)
                                       if sum((k + 1) * 2 for k in range(5) if m >> k & 1) >= 20), 32)


def test_normal_approximation_agrees_with_scipy():
    rng = np.random.default_rng(10)
    a = rng.normal(0.1, 1.0, 40)
    b = rng.normal(0.0, 1.0, 40)
    ours = wilcoxon_one_sided(a, b)
    ref = scipy_wilcoxon(a, b, alternative="greater", method="approx", correction=True).pvalue
    assert ours == pytest.approx(ref, rel=1e-9)


def test_exact_agrees_with_scipy_without_ties():
    rng = np.random.default_rng(11)
    a, b = rng.random(15), rng.random(15)
    ref = scipy_wilcoxon(a, b, alternative="greater", method="exact").pvalue
    assert wilcoxon_one_sided(a, b) == pytest.approx(ref, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(5, 12))
def test_exact_equals_enumeration_property(seed, n):
    rng = np.random.default_rng(seed)
    a = np.round(rng.normal(0.2, 1.0, n), 1)
    b = np.round(rng.normal(0.0, 1.0, n), 1)
    ranks, signs = signed_ranks(a, b)
    if ranks.size < 5:
        return
    observed = float(ranks[signs > 0].sum())
    assert wilcoxon_one_sided(a, b) == enumerate_upper_tail(ranks.tolist(), observed)
