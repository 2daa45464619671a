import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudrecon import uncertainty as U
from cloudrecon.errors import ConfigError, InputError


def naive_uce(sq, var, n_bins):
    """Loop-per-unit UCE with equal-width bins over the RMV scale, top edge inclusive."""
    sd = [math.sqrt(v) for v in var]
    lo, hi = min(sd), max(sd)
    width = (hi - lo) / n_bins
    members = [[] for _ in range(n_bins)]
    for i, s in enumerate(sd):
        b = 0 if width == 0 else min(int((s - lo) / width), n_bins - 1)
        # guard against floor rounding when s sits exactly on an interior edge
        while b > 0 and s < lo + b * width:
            b -= 1
        while b < n_bins - 1 and s >= lo + (b + 1) * width:
            b += 1
        members[b].append(i)
    total = 0.0
    for idx in members:
        if not idx:
            continue
        e = math.sqrt(sum(sq[i] for i in idx) / len(idx))
        u = math.sqrt(sum(var[i] for i in idx) / len(idx))
        total += len(idx) / len(sq) * abs(e - u)
    return total


def naive_rmv(var):
    flat = [v for row in var for v in row]
    return math.sqrt(sum(flat) / len(flat))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 300), bins=st.integers(1, 25))
def test_uce_matches_naive_loop(seed, n, bins):
    rng = np.random.default_rng(seed)
    var = rng.gamma(2.0, 0.05, n)
    sq = var * rng.chisquare(1, n)
    rep = U.uce(sq, var, bins)
    assert rep.uce == pytest.approx(naive_uce(sq.tolist(), var.tolist(), bins), abs=1e-9)
    assert rep.bin_counts.sum() == rep.total_count == n


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 50), k=st.integers(1, 6))
def test_rmv_matches_naive_loop(seed, n, k):
    var = np.random.default_rng(seed).gamma(1.5, 0.1, (n, k))
    assert U.rmv(var) == pytest.approx(naive_rmv(var.tolist()), abs=1e-12)


def test_rmv_two_pixels():
    assert U.rmv([[1.0], [9.0]]) == pytest.approx(math.sqrt(5.0), abs=1e-12)


def test_uce_hand_cases():
    assert U.uce([0.25], [0.09], 1).uce == pytest.approx(0.2)
    # two equally filled bins: gaps 0 and 0.1
    rep = U.uce([0.01, 0.09], [0.01, 0.04], 2)
    assert rep.uce == pytest.approx(0.5 * 0.0 + 0.5 * 0.1)
    assert list(rep.bin_counts) == [1, 1]


def test_uce_is_zero_when_every_unit_is_calibrated():
    var = np.random.default_rng(0).uniform(0.001, 0.2, 500)
    assert U.uce(var.copy(), var, 20).uce == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 1000), c=st.floats(0.01, 100.0))
def test_uce_scales_with_the_error_unit(seed, c):
    rng = np.random.default_rng(seed)
    var = rng.gamma(2.0, 0.05, 200)
    sq = var * rng.chisquare(1, 200)
    # scaling residuals and standard deviations by c scales UCE by c
    assert U.uce(c * c * sq, c * c * var, 20).uce == pytest.approx(c * U.uce(sq, var, 20).uce, rel=1e-9)


def test_bins_are_half_open_with_inclusive_top():
    var = np.array([0.0, 0.25, 1.0]) ** 2
    rep = U.uce(var, var, 2)
    assert list(rep.bin_edges) == [0.0, 0.5, 1.0]
    assert list(rep.bin_counts) == [2, 1]
    rep = U.uce(np.array([0.25, 0.5, 1.0]) ** 2, np.array([0.0, 0.5, 1.0]) ** 2, 2)
    assert list(rep.bin_counts) == [1, 2]


def test_empty_bins_report_zero():
    rep = U.uce([0.1, 0.1], [0.01, 1.0], 5)
    assert list(rep.bin_counts) == [1, 0, 0, 0, 1]
    assert rep.bin_rmse[1] == rep.bin_rmv[1] == 0.0
    assert np.all(np.diff(rep.bin_rmv[rep.bin_counts > 0]) >= 0)


def test_quantile_bins_fill_evenly():
    var = np.random.default_rng(1).gamma(2.0, 0.05, 1000)
    rep = U.uce(var, var, 10, binning="quantile")
    assert rep.bin_counts.min() >= 99 and rep.bin_counts.max() <= 101


def test_uce_errors():
    with pytest.raises(ConfigError):
        U.uce([1.0], [1.0], 0)
    with pytest.raises(ConfigError):
        U.uce([1.0], [1.0], 2, binning="log")
    with pytest.raises(InputError):
        U.uce([1.0, 2.0], [1.0], 2)
    with pytest.raises(InputError):
        U.uce([1.0], [-1.0], 2)
    with pytest.raises(InputError):
        U.uce([], [], 2)


def test_uce_image_examples():
    assert U.uce_image([0.06], [0.05], 20).uce == pytest.approx(0.01)
    e = np.array([0.1, 0.2, 0.3])
    assert U.uce_image(e, e.copy(), 20).uce == pytest.approx(0.0, abs=1e-15)
    rep = U.uce_image(e, e * 2, 50)  # more bins than images is fine
    assert rep.bin_counts.sum() == 3


def test_pixel_errors_average_over_channels_and_broadcast_isotropic():
    rng = np.random.default_rng(2)
    pred, target = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
    var = rng.random((2, 1, 4, 4))
    sq, mv = U.pixel_errors(pred, target, var)
    assert sq.shape == mv.shape == (32,)
    assert sq[5] == pytest.approx(((pred[0, :, 1, 1] - target[0, :, 1, 1]) ** 2).mean())
    assert mv[5] == pytest.approx(var[0, 0, 1, 1])


# -- ensembles ----------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 7))
def test_law_of_total_variance(seed, m):
    rng = np.random.default_rng(seed)
    scale = 10.0 ** rng.uniform(-3, 1)
    means = scale * rng.standard_normal((m, 3, 5, 5)) + rng.uniform(-5, 5)
    variances = scale**2 * rng.gamma(2.0, 0.5, (m, 3, 5, 5))
    out = U.ensemble_fuse(means, variances)
    assert np.allclose(out.mean, means.mean(axis=0), rtol=0, atol=1e-12 * max(1.0, np.abs(means).max()))
    assert np.allclose(out.aleatoric, variances.mean(axis=0), rtol=1e-12, atol=1e-15)
    assert np.allclose(out.epistemic, means.var(axis=0), rtol=1e-10, atol=1e-12 * scale**2)
    assert np.allclose(out.total_variance, out.aleatoric + out.epistemic, rtol=0, atol=1e-12)
    # E[second moment] - mean^2 form of the same identity
    second = (variances + means**2).mean(axis=0)
    assert np.allclose(out.total_variance, second - out.mean**2, rtol=1e-9, atol=1e-12 * (1 + np.abs(means).max()) ** 2)


def test_identical_members_have_exactly_zero_epistemic_term():
    rng = np.random.default_rng(3)
    mu, var = rng.random((4, 8, 8)) * 5, rng.random((4, 8, 8))
    out = U.ensemble_fuse(np.stack([mu] * 5), np.stack([var] * 5))
    assert np.all(out.epistemic == 0.0)
    assert np.array_equal(out.mean, mu)
    assert np.array_equal(out.total_variance, var)


def test_fusion_is_member_order_invariant_bitwise():
    rng = np.random.default_rng(4)
    means, variances = rng.random((5, 2, 6, 6)), rng.random((5, 2, 6, 6))
    a = U.ensemble_fuse(means, variances)
    perm = [3, 0, 4, 1, 2]
    b = U.ensemble_fuse(means[perm], variances[perm])
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.total_variance, b.total_variance)


def test_fusion_broadcasts_isotropic_variances():
    rng = np.random.default_rng(5)
    means, variances = rng.random((3, 4, 2, 2)), rng.random((3, 1, 2, 2))
    out = U.ensemble_fuse(means, variances)
    assert out.total_variance.shape == (4, 2, 2) and out.member_count == 3


def test_fusion_errors():
    with pytest.raises(InputError):
        U.ensemble_fuse(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(InputError):
        U.ensemble_fuse(np.zeros((2, 2)), -np.ones((2, 2)))


# -- discard curves ----------------------------------------------------------------


def test_discard_curve_matches_direct_computation():
    rng = np.random.default_rng(6)
    err, unc = rng.random(17), rng.random(17)
    curve = U.discard_curve(err, unc)
    assert len(curve) == 17
    ranked = err[np.argsort(unc)]
    for k in range(1, 18):
        assert curve.cumulative_rmse[k - 1] == pytest.approx(math.sqrt(np.mean(ranked[:k] ** 2)), rel=1e-12)
        assert curve.fraction_kept[k - 1] == pytest.approx(k / 17)
    assert curve.cumulative_rmse[-1] == pytest.approx(math.sqrt(np.mean(err**2)))


def test_discard_curve_breaks_ties_by_input_order():
    curve = U.discard_curve([0.3, 0.1, 0.2], [1.0, 1.0, 0.5])
    assert list(curve.order) == [2, 0, 1]


def test_discard_curve_at_fraction():
    curve = U.discard_curve([1.0, 2.0, 3.0, 4.0], [1, 2, 3, 4])
    assert curve.at(0.5) == pytest.approx(math.sqrt((1 + 4) / 2))
    assert curve.at(0.6) == curve.at(0.5)
    assert curve.at(1.0) == pytest.approx(math.sqrt(30 / 4))


def test_perfect_ranking_gives_a_monotone_curve():
    err = np.linspace(0.1, 1.0, 20)
    curve = U.discard_curve(err, err)
    assert np.all(np.diff(curve.cumulative_rmse) > 0)


def test_discard_curve_errors():
    with pytest.raises(InputError):
        U.discard_curve([1.0], [1.0, 2.0])
    with pytest.raises(InputError):
        U.discard_curve([], [])


def test_csv_exports(tmp_path):
    rep = U.uce([0.01, 0.04, 0.09], [0.01, 0.05, 0.1], 3)
    text = rep.to_csv(tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "bin_lo,bin_hi,count,rmse,rmv"
    assert len(text) == 4
    curve = U.discard_curve([0.1, 0.2], [2.0, 1.0])
    lines = curve.to_csv(tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "fraction_kept,cumulative_rmse" and lines[1] == "0.5,0.2"
