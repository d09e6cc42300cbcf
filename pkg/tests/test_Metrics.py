import math

import numpy as np
import pytest
from scipy import ndimage, stats

from ptycho_ad.Metrics import (
    HISTORY_COLUMNS,
    SSIM_WINDOW,
    ConvergenceHistory,
    EpochRecord,
    abbeLimit,
    centerCropPair,
    compareObjects,
    lineProfileFwhm,
    normalisedSsim,
    numericalApertureFor,
    positionErrorStats,
    removeAmbiguities,
    scanRegionShape,
    ssim,
    wrapPhase,
)
from ptycho_ad.errors import DimensionError, NumericError, ParameterError


def _smoothImage(rng, shape=(32, 32)):
    return ndimage.gaussian_filter(rng.normal(size=shape), 2.0)


def test_ssim_window():
    assert SSIM_WINDOW == 11


def test_ssim_identical_images():
    image = np.random.default_rng(0).uniform(size=(24, 24))
    assert ssim(image, image) == pytest.approx(1.0)
    assert ssim(np.full((16, 16), 0.3), np.full((16, 16), 0.3)) == pytest.approx(1.0)


def test_ssim_is_symmetric(rng):
    a = rng.uniform(size=(20, 20))
    b = a + 0.3 * rng.normal(size=(20, 20))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_inverted_image_is_negative(rng):
    a = rng.uniform(size=(20, 20))
    assert ssim(a, 1.0 - a) < 0


def test_ssim_falls_with_noise(rng):
    a = _smoothImage(rng)
    noise = rng.normal(size=a.shape)
    scores = [ssim(a, a + s * noise) for s in (0.01, 0.05, 0.2, 1.0)]
    assert scores == sorted(scores, reverse=True)
    assert scores[0] > 0.9


def test_ssim_validation():
    with pytest.raises(DimensionError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(DimensionError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))
    bad = np.zeros((12, 12))
    bad[3, 3] = np.nan
    with pytest.raises(NumericError):
        ssim(bad, np.zeros((12, 12)))


def test_remove_ambiguities_undoes_ramp_and_global_phase(rng):
    truth = (1 + rng.uniform(size=(15, 17))) * np.exp(1j * rng.uniform(-1, 1, size=(15, 17)))
    rows, cols = truth.shape
    y = np.arange(rows)[:, None] - (rows - 1) / 2.0
    x = np.arange(cols)[None, :] - (cols - 1) / 2.0
    recon = truth * np.exp(1j * (0.3 + 0.05 * x - 0.02 * y))

    np.testing.assert_allclose(removeAmbiguities(recon, truth), truth, atol=1e-10)
    np.testing.assert_array_equal(removeAmbiguities(np.zeros((3, 3)), truth[:3, :3]), 0)

    scores = compareObjects(recon, truth)
    assert scores['ssimMagnitude'] == pytest.approx(1.0, abs=1e-9)
    assert scores['ssimPhase'] == pytest.approx(1.0, abs=1e-9)


def test_wrap_phase():
    np.testing.assert_allclose(wrapPhase(np.array([np.pi, -np.pi, 0.5, -0.5, 2 * np.pi + 0.25])), [np.pi, np.pi, 0.5, -0.5, 0.25], atol=1e-12)
    wrapped = wrapPhase(np.linspace(-20, 20, 101))
    assert np.all(wrapped > -np.pi)
    assert np.all(wrapped <= np.pi)


def test_center_crop_pair():
    a = np.arange(7 * 9).reshape(7, 9)
    b = np.zeros((5, 11))
    ca, cb = centerCropPair(a, b)
    assert ca.shape == cb.shape == (5, 9)
    np.testing.assert_array_equal(ca, a[1:6, :])

    ca, _ = centerCropPair(a, a, maxShape=(4, 4))
    assert ca.shape == (3, 3)
    np.testing.assert_array_equal(ca, a[2:5, 3:6])

    with pytest.raises(DimensionError):
        centerCropPair(np.zeros((6, 6)), np.zeros((5, 6)))


def test_scan_region_shape():
    assert scanRegionShape(np.array([[3.2, -1.0], [0.0, 2.0]]), 1.0) == (7, 11)
    assert scanRegionShape(np.zeros((1, 2)), 0.0) == (1, 1)


def test_position_error_stats():
    result = positionErrorStats(np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]), np.zeros((3, 2)))
    assert result.median_px == pytest.approx(1.0)
    assert result.mean_px == pytest.approx(2.0)
    assert result.max_px == pytest.approx(5.0)
    assert result.histogramCounts.sum() == 3
    assert result.getJson()['max_px'] == pytest.approx(5.0)

    with pytest.raises(DimensionError):
        positionErrorStats(np.zeros((2, 2)), np.zeros((3, 2)))


def test_gaussian_jitter_errors_are_rayleigh():
    rng = np.random.default_rng(21)
    truth = rng.uniform(-50, 50, size=(800, 2))
    errors = positionErrorStats(truth + rng.normal(0.0, 1.5, size=truth.shape), truth).errors_px
    assert stats.kstest(errors, stats.rayleigh(scale=1.5).cdf).pvalue > 0.01


def test_line_profile_of_an_edge():
    image = np.zeros((11, 20))
    image[:, 10:] = 1.0
    profile = lineProfileFwhm(image, (0, 5), (19, 5))
    assert profile.kind == 'edge'
    assert profile.width_px == pytest.approx(0.5, abs=1e-9)


def test_line_profile_of_a_gaussian_peak():
    sigma = 3.0
    x = np.arange(41)
    image = np.tile(np.exp(-0.5 * ((x - 20) / sigma) ** 2), (5, 1))
    profile = lineProfileFwhm(image, (0, 2), (40, 2))
    assert profile.kind == 'peak'
    assert profile.defined
    assert profile.width_px == pytest.approx(2 * math.sqrt(2 * math.log(2)) * sigma, rel=0.02)


def test_line_profile_flat_and_invalid():
    profile = lineProfileFwhm(np.ones((8, 8)), (0, 0), (7, 7))
    assert profile.kind == 'flat'
    assert not profile.defined
    assert math.isnan(profile.width_px)

    with pytest.raises(ParameterError):
        lineProfileFwhm(np.ones((8, 8)), (0, 0), (8, 0))
    with pytest.raises(DimensionError):
        lineProfileFwhm(np.ones(8), (0, 0), (1, 0))


def test_abbe_limit():
    assert abbeLimit(1e-9, 0.1) == pytest.approx(8.2e-9)
    assert numericalApertureFor(1e-9, abbeLimit(1e-9, 0.05)) == pytest.approx(0.05)
    with pytest.raises(ParameterError):
        abbeLimit(1e-9, 0.0)
    with pytest.raises(ParameterError):
        numericalApertureFor(1e-9, 0.0)


def _record(epoch, ssimMagnitude=math.nan):
    return EpochRecord(epoch, 2.0 / epoch, 1.5 / epoch, 0.5 / epoch, 0.1, 0.5 ** (epoch - 1), ssimMagnitude=ssimMagnitude)


def test_convergence_history():
    history = ConvergenceHistory([_record(1, 0.4), _record(2, 0.6), _record(3, 0.8)])
    assert len(history) == 3
    np.testing.assert_allclose(history.column('loss'), [2.0, 1.0, 2.0 / 3])
    assert list(history.records[0].getJson()) == list(HISTORY_COLUMNS)

    with pytest.raises(ParameterError):
        history.append(_record(3))
    with pytest.raises(ParameterError):
        history.column('gradientNorm')

    restored = ConvergenceHistory.fromArray(history.toArray())
    np.testing.assert_array_equal(restored.column('ssimMagnitude'), [0.4, 0.6, 0.8])
    np.testing.assert_array_equal(restored.column('learningRateScale'), [1.0, 0.5, 0.25])
    assert ConvergenceHistory.fromArray(ConvergenceHistory().toArray()).records == []

    csvLines = history.toCsv().splitlines()
    assert csvLines[0] == ','.join(HISTORY_COLUMNS)
    assert 'learningRateScale' in csvLines[0].split(',')
    assert len(csvLines) == 4
    assert csvLines[1].startswith('1,2.0,1.5,0.5,0.1,1.0,nan')


def test_normalised_ssim():
    history = ConvergenceHistory([_record(1, 0.4), _record(2, 0.8)])
    np.testing.assert_allclose(normalisedSsim(history), [0.5, 1.0])
    assert np.isnan(normalisedSsim(ConvergenceHistory([_record(1)]))).all()
    assert len(normalisedSsim(ConvergenceHistory())) == 0
