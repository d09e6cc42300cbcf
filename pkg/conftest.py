import numpy as np
import pytest

from ptycho_ad.Autodiff import Variable, analyticGradients
from ptycho_ad.Dataset import GroundTruth, PtychoDataset
from ptycho_ad.Simulator import SimulationRecipe, synthesizeDataset


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help="run the long reconstruction acceptance tests")


def pytest_configure(config):
    config.addinivalue_line('markers', "slow: long-running reconstruction acceptance test")


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skipSlow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skipSlow)


def randomComplex(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def directionalError(f, point, rng: np.random.Generator, eps: float = 1e-6) -> float:
    """
    Relative error between the tape gradient projected on a random direction and the
    central difference of `f` along that direction.
    """
    point = [np.asarray(x) for x in point]
    grads = analyticGradients(f, point)
    directions = [randomComplex(rng, x.shape) if np.iscomplexobj(x) else rng.normal(size=x.shape) for x in point]

    analytic = sum(float(np.sum(np.real(np.conj(g) * d))) for g, d in zip(grads, directions))

    def _value(sign):
        return float(np.real(f(*[Variable(x + sign * eps * d) for x, d in zip(point, directions)]).value))

    numeric = (_value(1.0) - _value(-1.0)) / (2 * eps)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smallRecipe():
    """
    16x16 patterns on a 3x3 grid: a few milliseconds per epoch.
    """
    return SimulationRecipe(
        wavelength_m=1e-9,
        distance_m=0.1,
        pixelPitch_m=5e-6,
        patternSize=16,
        gridSize=3,
        overlap=0.5,
        scanJitterStd_px=0.5,
        probeRadius_px=4.0,
        seed=3,
        distanceError=0.3,
        positionJitterStd_px=1.0,
    )


@pytest.fixture
def smallSimulation(smallRecipe):
    return synthesizeDataset(smallRecipe)


@pytest.fixture
def flatTruth(rng):
    """
    Ground truth with an 8x8 random probe and a flat object, for corruption tests.
    """
    def _make(positions_px: np.ndarray, pixelPitch_m: float = 1e-6) -> GroundTruth:
        return GroundTruth(
            np.ones((8, 8), dtype=np.complex128),
            randomComplex(rng, (1, 8, 8)),
            0.1,
            positions_px * pixelPitch_m,
            pixelPitch_m,
            1e-9,
        )
    return _make


@pytest.fixture
def tinyDataset(rng):
    patterns = rng.uniform(0.0, 2.0, size=(4, 8, 8))
    positions = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]) * 1e-6
    return PtychoDataset(patterns, 1e-9, 1e-3, 1e-6, positions)
