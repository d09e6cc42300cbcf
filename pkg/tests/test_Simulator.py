import numpy as np
import pytest
from skimage import io as skio

from ptycho_ad.Simulator import (
    DISTANCE_SWEEP_M,
    SimulationRecipe,
    areaOverlapFactor,
    corruptParameters,
    distanceSweep,
    loadTestImage,
    makeScanGrid,
    overlapFactor,
    simulatePatterns,
    stepForOverlap,
    synthesizeDataset,
)
from ptycho_ad.errors import ConfigError, ParameterError


def test_scan_grid_layout():
    grid = makeScanGrid(3, 2.0, 0.0, seed=0)
    assert grid.positions_px.shape == (9, 2)
    # [x, y], y outer
    np.testing.assert_array_equal(grid.positions_px[:4], [[-2, -2], [0, -2], [2, -2], [-2, 0]])
    np.testing.assert_array_equal(grid.positions_px.mean(axis=0), [0, 0])
    np.testing.assert_array_equal(grid.jitter_px, 0)


def test_scan_grid_jitter_statistics():
    grid = makeScanGrid(11, 10.0, 2.0, seed=4)
    assert np.std(grid.jitter_px) == pytest.approx(2.0, rel=0.15)
    np.testing.assert_array_equal(grid.positions_px, makeScanGrid(11, 10.0, 2.0, seed=4).positions_px)
    assert not np.array_equal(grid.positions_px, makeScanGrid(11, 10.0, 2.0, seed=5).positions_px)


def test_scan_grid_validation():
    with pytest.raises(ParameterError):
        makeScanGrid(1, 1.0, 0.0, 0)
    with pytest.raises(ParameterError):
        makeScanGrid(3, 0.0, 0.0, 0)
    with pytest.raises(ParameterError):
        makeScanGrid(3, 1.0, -1.0, 0)


def test_overlap_factors():
    assert overlapFactor(4.0, 8.0) == pytest.approx(0.5)
    assert overlapFactor(20.0, 8.0) == 0.0
    assert stepForOverlap(0.7, 16.0) == pytest.approx(4.8)
    assert overlapFactor(stepForOverlap(0.3, 10.0), 10.0) == pytest.approx(0.3)

    assert areaOverlapFactor(0.0, 8.0) == pytest.approx(1.0)
    assert areaOverlapFactor(8.0, 8.0) == 0.0
    areas = [areaOverlapFactor(s, 8.0) for s in np.linspace(0.0, 8.0, 9)]
    assert areas == sorted(areas, reverse=True)
    # area overlap falls faster than linear overlap
    assert areaOverlapFactor(4.0, 8.0) < overlapFactor(4.0, 8.0)

    with pytest.raises(ParameterError):
        overlapFactor(1.0, 0.0)


def test_load_test_image():
    image = loadTestImage('camera', (32, 48))
    assert image.shape == (32, 48)
    assert image.min() == 0.0
    assert image.max() == 1.0
    # RGB sample images come back as grayscale
    assert loadTestImage('coffee', (16, 16)).shape == (16, 16)
    with pytest.raises(ConfigError):
        loadTestImage('no-such-image', (8, 8))


def test_load_test_image_from_file(tmp_path):
    path = str(tmp_path / 'ramp.png')
    skio.imsave(path, np.tile(np.arange(0, 256, 16, dtype=np.uint8), (16, 1)), check_contrast=False)
    image = loadTestImage(path, (16, 16))
    assert image.shape == (16, 16)
    assert image[:, 0].mean() < image[:, -1].mean()


def test_recipe_validation():
    with pytest.raises(ConfigError):
        SimulationRecipe.fromConfigDict({'size': 32})
    with pytest.raises(ConfigError):
        SimulationRecipe(patternSize=16, probeRadius_px=9.0)
    with pytest.raises(ConfigError):
        SimulationRecipe(overlap=1.0)
    with pytest.raises(ConfigError):
        SimulationRecipe(noise='gaussian')
    with pytest.raises(ConfigError):
        SimulationRecipe(distanceError=-1.0)
    with pytest.raises(ConfigError):
        SimulationRecipe.fromConfigDict({'gridSize': 'abc'})
    with pytest.raises(ConfigError):
        SimulationRecipe.fromConfigDict({'objectMagnitudeRange': ['low', 1.0]})

    recipe = SimulationRecipe.fromConfigDict({'patternSize': 32, 'step_px': 3.0})
    assert recipe.scanStep_px == 3.0
    assert recipe.probeRadius_px == 8.0
    assert SimulationRecipe.fromConfigDict(recipe.getJson()).getJson() == recipe.getJson()


def test_synthesized_dataset(smallRecipe, smallSimulation):
    dataset, truth = smallSimulation
    assert dataset.patterns.shape == (9, 16, 16)
    assert np.all(dataset.patterns >= 0)
    assert truth.distance_m == 0.1
    assert dataset.distance_m == pytest.approx(0.13)
    assert truth.probeModes.shape == (1, 16, 16)
    assert np.abs(truth.obj).max() <= 1.0 + 1e-12

    # patterns are simulated at the true parameters, not the corrupted ones
    expected = simulatePatterns(truth.obj, truth.probeModes, truth.positions_m, truth.pixelPitch_m, truth.wavelength_m, truth.distance_m)
    np.testing.assert_array_equal(dataset.patterns, expected)
    assert not np.allclose(dataset.positions_m, truth.positions_m)

    again, _ = synthesizeDataset(smallRecipe)
    np.testing.assert_array_equal(again.patterns, dataset.patterns)
    np.testing.assert_array_equal(again.positions_m, dataset.positions_m)


def test_poisson_noise(smallRecipe):
    smallRecipe.noise = 'poisson'
    smallRecipe.flux = 1e4
    dataset, truth = synthesizeDataset(smallRecipe)
    np.testing.assert_array_equal(dataset.patterns, np.round(dataset.patterns))
    assert dataset.patterns.sum(axis=(1, 2)).max() == pytest.approx(1e4, rel=0.05)
    # the probe is rescaled to the photon budget
    assert np.sum(np.abs(truth.probeModes) ** 2) >= 1e4 * 0.9


def test_dark_frames(smallRecipe, smallSimulation):
    smallRecipe.darkFrames = 3
    smallRecipe.darkLevel = 2.0
    dataset, _ = synthesizeDataset(smallRecipe)
    clean, _ = smallSimulation
    assert dataset.darks.shape == (3, 16, 16)
    np.testing.assert_allclose(dataset.correctedPatterns(), clean.patterns, atol=1e-12)


def test_extra_probe_modes(smallRecipe):
    smallRecipe.probeModes = 2
    _, truth = synthesizeDataset(smallRecipe)
    energies = np.sum(np.abs(truth.probeModes) ** 2, axis=(1, 2))
    assert energies[1] == pytest.approx(0.1 * energies[0])


def test_corrupt_parameters(flatTruth):
    positions = makeScanGrid(4, 3.0, 0.0, seed=0).positions_px
    truth = flatTruth(positions)
    state = corruptParameters(truth, 0.2, 1.5, seed=9)

    assert state.distance_m == pytest.approx(0.12)
    assert state.distanceScale == 0.0
    jitter = state.nominal_m / truth.pixelPitch_m - positions
    np.testing.assert_allclose(jitter.mean(axis=0), 0, atol=1e-12)
    assert np.std(jitter) > 0.5
    np.testing.assert_array_equal(state.corrections, 0)
    np.testing.assert_array_equal(state.obj, 1)
    assert np.sum(np.abs(state.probeModes) ** 2) == pytest.approx(np.sum(np.abs(truth.probeModes) ** 2))

    again = corruptParameters(truth, 0.2, 1.5, seed=9)
    np.testing.assert_array_equal(again.nominal_m, state.nominal_m)


def test_corrupt_parameters_from_truth(flatTruth, rng):
    positions = np.array([[-1.0, 0.0], [1.0, 0.0]])
    truth = flatTruth(positions)
    truth.obj = rng.normal(size=(16, 18)) + 0j
    state = corruptParameters(truth, 0.0, 0.0, seed=0, initFromTruth=True)

    assert state.obj.shape == (16, 18)
    np.testing.assert_array_equal(state.obj, truth.obj)
    np.testing.assert_array_equal(state.probeModes, truth.probeModes)
    assert state.distance_m == truth.distance_m
    assert state.energyTarget == pytest.approx(np.sum(np.abs(truth.probeModes) ** 2))


def test_corrupt_parameters_validation(flatTruth):
    truth = flatTruth(np.zeros((2, 2)))
    with pytest.raises(ParameterError):
        corruptParameters(truth, -1.0, 0.0, 0)
    with pytest.raises(ParameterError):
        corruptParameters(truth, 0.0, -0.1, 0)


def test_distance_sweep(smallRecipe):
    sweep = distanceSweep(smallRecipe, [0.05, 0.2])
    assert [truth.distance_m for _, truth in sweep] == [0.05, 0.2]
    assert not np.allclose(sweep[0][0].patterns, sweep[1][0].patterns)
    assert len(DISTANCE_SWEEP_M) == 5
    assert DISTANCE_SWEEP_M[0] == pytest.approx(0.065)
    assert DISTANCE_SWEEP_M[-1] == pytest.approx(0.2)
