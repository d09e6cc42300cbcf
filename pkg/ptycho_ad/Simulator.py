"""
Synthetic ptychography datasets and controlled parameter corruption.
"""

import copy
import logging
import math
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage import data as skdata
from skimage import io as skio
from skimage.color import rgb2gray, rgba2rgb
from skimage.transform import resize

from .Dataset import GroundTruth, PtychoDataset
from .ForwardModel import ObjectMap, ProbeModes, ScanSet, requiredObjectShape, simulateBatch
from .Optics import PropagationSpec
from .Reconstructor import ReconstructionState, initialProbe, probeEnergy
from .const import EXTRA_MODE_ENERGY_FRACTION
from .errors import ConfigError, ParameterError

logger = logging.getLogger(__name__)

DISTANCE_SWEEP_M = tuple(np.linspace(0.065, 0.2, 5))


class NoiseModel():
    NONE = 'none'
    POISSON = 'poisson'


class SimulationRecipe():
    KEYS = {
        'wavelength_m', 'distance_m', 'pixelPitch_m', 'patternSize', 'gridSize', 'overlap',
        'step_px', 'scanJitterStd_px', 'probeRadius_px', 'probeModes', 'noise', 'flux', 'seed',
        'objectMagnitudeImage', 'objectPhaseImage', 'probeMagnitudeImage', 'probePhaseImage',
        'objectMagnitudeRange', 'objectPhaseRange_rad', 'probePhaseRange_rad',
        'distanceError', 'positionJitterStd_px', 'darkFrames', 'darkLevel',
    }

    def __init__(
            self,
            wavelength_m: float = 1e-9,
            distance_m: float = 0.1,
            pixelPitch_m: float = 2e-6,
            patternSize: int = 64,
            gridSize: int = 7,
            overlap: float = 0.7,
            step_px: Optional[float] = None,
            scanJitterStd_px: float = 1.0,
            probeRadius_px: Optional[float] = None,
            probeModes: int = 1,
            noise: str = NoiseModel.NONE,
            flux: float = 1e6,
            seed: int = 0,
            objectMagnitudeImage: str = 'camera',
            objectPhaseImage: str = 'moon',
            probeMagnitudeImage: str = 'chelsea',
            probePhaseImage: str = 'coffee',
            objectMagnitudeRange: Sequence[float] = (0.5, 1.0),
            objectPhaseRange_rad: float = math.pi / 2,
            probePhaseRange_rad: float = math.pi,
            distanceError: float = 0.3,
            positionJitterStd_px: float = 5.0,
            darkFrames: int = 0,
            darkLevel: float = 0.0,
        ):
        """
        step_px
            Scan step; None derives it from `overlap` and the probe diameter.
        probeRadius_px
            Radius of the probe support; None for a quarter of the pattern side.
        flux
            Photons in the brightest pattern when noise is 'poisson'.
        distanceError / positionJitterStd_px
            Corruption applied to the distance and positions written to the dataset.
        """
        self.wavelength_m = float(wavelength_m)
        self.distance_m = float(distance_m)
        self.pixelPitch_m = float(pixelPitch_m)
        self.patternSize = int(patternSize)
        self.gridSize = int(gridSize)
        self.overlap = float(overlap)
        self.step_px = None if step_px is None else float(step_px)
        self.scanJitterStd_px = float(scanJitterStd_px)
        self.probeRadius_px = float(probeRadius_px) if probeRadius_px is not None else self.patternSize / 4.0
        self.probeModes = int(probeModes)
        self.noise = str(noise).lower()
        self.flux = float(flux)
        self.seed = int(seed)
        self.objectMagnitudeImage = objectMagnitudeImage
        self.objectPhaseImage = objectPhaseImage
        self.probeMagnitudeImage = probeMagnitudeImage
        self.probePhaseImage = probePhaseImage
        self.objectMagnitudeRange = tuple(float(v) for v in objectMagnitudeRange)
        self.objectPhaseRange_rad = float(objectPhaseRange_rad)
        self.probePhaseRange_rad = float(probePhaseRange_rad)
        self.distanceError = float(distanceError)
        self.positionJitterStd_px = float(positionJitterStd_px)
        self.darkFrames = int(darkFrames)
        self.darkLevel = float(darkLevel)

        if self.wavelength_m <= 0 or self.pixelPitch_m <= 0:
            raise ConfigError("wavelength_m and pixelPitch_m must be positive")
        if self.patternSize < 2:
            raise ConfigError("patternSize must be >= 2")
        if self.gridSize < 2:
            raise ConfigError("gridSize must be >= 2")
        if self.scanJitterStd_px < 0 or self.positionJitterStd_px < 0:
            raise ConfigError("jitter standard deviations must be >= 0")
        if not 0 < self.probeRadius_px <= self.patternSize / 2:
            raise ConfigError(f"probeRadius_px must be in (0, patternSize/2], got {self.probeRadius_px}")
        if self.step_px is None and not 0 <= self.overlap < 1:
            raise ConfigError("overlap must be in [0, 1)")
        if self.step_px is not None and self.step_px <= 0:
            raise ConfigError("step_px must be > 0")
        if self.probeModes < 1:
            raise ConfigError("probeModes must be >= 1")
        if self.noise not in (NoiseModel.NONE, NoiseModel.POISSON):
            raise ConfigError(f"Unknown noise model '{noise}'")
        if self.noise == NoiseModel.POISSON and self.flux <= 0:
            raise ConfigError("flux must be > 0")
        if not self.distanceError > -1:
            raise ConfigError("distanceError must be > -1")
        if len(self.objectMagnitudeRange) != 2 or not 0 <= self.objectMagnitudeRange[0] <= self.objectMagnitudeRange[1]:
            raise ConfigError("objectMagnitudeRange must be [low, high] with 0 <= low <= high")
        if self.darkFrames < 0 or self.darkLevel < 0:
            raise ConfigError("darkFrames and darkLevel must be >= 0")

    @classmethod
    def fromConfigDict(cls, configDict: Optional[Dict[str, Any]]) -> "SimulationRecipe":
        configDict = dict(configDict or {})
        unknown = set(configDict) - cls.KEYS
        if unknown:
            raise ConfigError(f"Unknown recipe key(s): {sorted(unknown)}")
        try:
            return cls(**configDict)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid recipe value: {e}")

    @property
    def scanStep_px(self) -> float:
        if self.step_px is not None:
            return self.step_px
        return stepForOverlap(self.overlap, 2 * self.probeRadius_px)

    def withDistance(self, distance_m: float) -> "SimulationRecipe":
        recipe = copy.copy(self)
        recipe.distance_m = float(distance_m)
        return recipe

    def getJson(self):
        return {
            'wavelength_m': self.wavelength_m,
            'distance_m': self.distance_m,
            'pixelPitch_m': self.pixelPitch_m,
            'patternSize': self.patternSize,
            'gridSize': self.gridSize,
            'overlap': self.overlap,
            'step_px': self.step_px,
            'scanJitterStd_px': self.scanJitterStd_px,
            'probeRadius_px': self.probeRadius_px,
            'probeModes': self.probeModes,
            'noise': self.noise,
            'flux': self.flux,
            'seed': self.seed,
            'objectMagnitudeImage': self.objectMagnitudeImage,
            'objectPhaseImage': self.objectPhaseImage,
            'probeMagnitudeImage': self.probeMagnitudeImage,
            'probePhaseImage': self.probePhaseImage,
            'objectMagnitudeRange': list(self.objectMagnitudeRange),
            'objectPhaseRange_rad': self.objectPhaseRange_rad,
            'probePhaseRange_rad': self.probePhaseRange_rad,
            'distanceError': self.distanceError,
            'positionJitterStd_px': self.positionJitterStd_px,
            'darkFrames': self.darkFrames,
            'darkLevel': self.darkLevel,
        }


###################################################################
#                                                                 #
#                          Scan Geometry                          #

class ScanGrid():
    def __init__(self, positions_px: np.ndarray, jitter_px: np.ndarray):
        self.positions_px = positions_px
        self.jitter_px = jitter_px


def makeScanGrid(n: int, step_px: float, jitterStd_px: float, seed: int) -> ScanGrid:
    """
    n x n raster centered on the origin, plus i.i.d. Gaussian jitter per coordinate.
    Positions are [x, y] pixels, row-major (y outer).
    """
    if n < 2:
        raise ParameterError(f"makeScanGrid: n must be >= 2, got {n}")
    if not step_px > 0:
        raise ParameterError(f"makeScanGrid: step must be > 0, got {step_px}")
    if jitterStd_px < 0:
        raise ParameterError("makeScanGrid: jitter must be >= 0")

    axis = (np.arange(n) - (n - 1) / 2.0) * step_px
    yy, xx = np.meshgrid(axis, axis, indexing='ij')
    grid = np.stack([xx.ravel(), yy.ravel()], axis=-1)

    rng = np.random.default_rng(seed)
    jitter = rng.normal(0.0, jitterStd_px, size=grid.shape) if jitterStd_px > 0 else np.zeros_like(grid)
    return ScanGrid(grid + jitter, jitter)


def overlapFactor(step: float, probeDiameter: float) -> float:
    """
    Linear overlap 1 - step / diameter, clamped to [0, 1].
    """
    if not probeDiameter > 0:
        raise ParameterError("overlapFactor: probe diameter must be > 0")
    return float(np.clip(1.0 - step / probeDiameter, 0.0, 1.0))


def stepForOverlap(overlap: float, probeDiameter: float) -> float:
    return (1.0 - overlap) * probeDiameter


def areaOverlapFactor(step: float, probeDiameter: float) -> float:
    """
    Fraction of a circular probe's area shared with its neighbour one step away.
    """
    if not probeDiameter > 0:
        raise ParameterError("areaOverlapFactor: probe diameter must be > 0")
    r = probeDiameter / 2.0
    d = abs(step)
    if d >= probeDiameter:
        return 0.0
    lens = 2 * r * r * math.acos(d / (2 * r)) - 0.5 * d * math.sqrt(4 * r * r - d * d)
    return lens / (math.pi * r * r)

#                          Scan Geometry                          #
#                                                                 #
###################################################################


def loadTestImage(name: str, shape: Tuple[int, int]) -> np.ndarray:
    """
    Grayscale image in [0, 1] resized to `shape`: a scikit-image sample image name
    (e.g. 'camera', 'astronaut', 'chelsea', 'coffee', 'moon') or a file path.
    """
    if os.path.exists(name):
        image = skio.imread(name)
    else:
        loader = getattr(skdata, name, None)
        if loader is None or not callable(loader):
            raise ConfigError(f"Unknown test image '{name}'")
        image = loader()

    image = np.asarray(image)
    if image.ndim == 3 and image.shape[-1] == 4:
        image = rgba2rgb(image)
    if image.ndim == 3:
        image = rgb2gray(image)
    image = resize(image.astype(np.float64), shape, anti_aliasing=True)

    lo, hi = float(image.min()), float(image.max())
    if hi - lo <= 0:
        return np.zeros(shape)
    return (image - lo) / (hi - lo)


def _diskMask(shape: Tuple[int, int], radius_px: float) -> np.ndarray:
    rows, cols = shape
    y = np.arange(rows) - (rows - 1) / 2.0
    x = np.arange(cols) - (cols - 1) / 2.0
    return (np.hypot(x[None, :], y[:, None]) <= radius_px).astype(np.float64)


def _trueProbe(recipe: SimulationRecipe, rng: np.random.Generator) -> np.ndarray:
    shape = (recipe.patternSize, recipe.patternSize)
    mask = _diskMask(shape, recipe.probeRadius_px)
    magnitude = loadTestImage(recipe.probeMagnitudeImage, shape)
    phase = (loadTestImage(recipe.probePhaseImage, shape) - 0.5) * recipe.probePhaseRange_rad
    main = mask * (0.5 + 0.5 * magnitude) * np.exp(1j * phase)

    modes = [main]
    mainEnergy = np.sum(np.abs(main) ** 2)
    for m in range(1, recipe.probeModes):
        randomPhase = ndimage.gaussian_filter(rng.normal(size=shape), sigma=2.0)
        randomPhase *= np.pi / max(np.abs(randomPhase).max(), 1e-12)
        mode = mask * np.exp(1j * randomPhase)
        mode *= math.sqrt(mainEnergy * EXTRA_MODE_ENERGY_FRACTION ** m / np.sum(np.abs(mode) ** 2))
        modes.append(mode)
    return np.stack(modes, axis=0)


def _trueObject(recipe: SimulationRecipe, shape: Tuple[int, int]) -> np.ndarray:
    lo, hi = recipe.objectMagnitudeRange
    magnitude = lo + (hi - lo) * loadTestImage(recipe.objectMagnitudeImage, shape)
    phaseImage = loadTestImage(recipe.objectPhaseImage, shape)
    phase = (phaseImage - phaseImage.mean()) * recipe.objectPhaseRange_rad
    return magnitude * np.exp(1j * phase)


def simulatePatterns(obj: np.ndarray, probeModes: np.ndarray, positions_m: np.ndarray, pixelPitch_m: float, wavelength_m: float, distance_m: float) -> np.ndarray:
    """
    Noiseless (J, K, K) intensities for known parameters.
    """
    spec = PropagationSpec(wavelength_m, distance_m, pixelPitch_m)
    scan = ScanSet(positions_m, pixelPitch_m)
    sim = simulateBatch(ProbeModes(list(probeModes)), ObjectMap(obj), scan, np.arange(len(scan)), spec)
    return np.maximum(sim.value, 0.0)


def synthesizeDataset(recipe: SimulationRecipe) -> Tuple[PtychoDataset, GroundTruth]:
    """
    Forward-model intensities at the true parameters. The returned dataset carries
    the corrupted distance and positions of `corruptParameters`; the ground truth
    carries the true ones.
    """
    rng = np.random.default_rng([recipe.seed, 1])

    grid = makeScanGrid(recipe.gridSize, recipe.scanStep_px, recipe.scanJitterStd_px, recipe.seed)
    K = recipe.patternSize
    objectShape = requiredObjectShape(grid.positions_px, (K, K))

    obj = _trueObject(recipe, objectShape)
    probe = _trueProbe(recipe, rng)
    positions_m = grid.positions_px * recipe.pixelPitch_m

    patterns = simulatePatterns(obj, probe, positions_m, recipe.pixelPitch_m, recipe.wavelength_m, recipe.distance_m)

    if recipe.noise == NoiseModel.POISSON:
        scaleFactor = recipe.flux / patterns.sum(axis=(1, 2)).max()
        probe = probe * math.sqrt(scaleFactor)
        patterns = rng.poisson(patterns * scaleFactor).astype(np.float64)

    darks = None
    if recipe.darkFrames:
        darks = np.full((recipe.darkFrames, K, K), recipe.darkLevel)
        patterns = patterns + recipe.darkLevel

    truth = GroundTruth(obj, probe, recipe.distance_m, positions_m, recipe.pixelPitch_m, recipe.wavelength_m)
    corrupted = corruptParameters(truth, recipe.distanceError, recipe.positionJitterStd_px, recipe.seed)

    dataset = PtychoDataset(
        patterns,
        recipe.wavelength_m,
        corrupted.distance_m,
        recipe.pixelPitch_m,
        corrupted.nominal_m,
        darks=darks,
        notes={
            'generator': 'ptycho_ad.Simulator',
            'seed': recipe.seed,
            'noise': recipe.noise,
            'distanceError': recipe.distanceError,
            'positionJitterStd_px': recipe.positionJitterStd_px,
        },
    )
    logger.info(f"Synthesized {len(patterns)} patterns of {K}x{K} px, object {objectShape}, z {recipe.distance_m} m")
    return dataset, truth


def corruptParameters(
        truth: GroundTruth,
        distanceError: float,
        positionJitterStd_px: float,
        seed: int,
        probeRadius_px: Optional[float] = None,
        energyTarget: Optional[float] = None,
        numModes: int = 1,
        initFromTruth: bool = False,
    ) -> ReconstructionState:
    """
    Initial state with z = z_true * (1 + distanceError) and nominal positions
    perturbed by Gaussian jitter (its mean removed, the common translation being
    unobservable). Object and probe start flat unless `initFromTruth`. The state's
    energy target defaults to the true probe energy.
    """
    if not distanceError > -1:
        raise ParameterError("corruptParameters: distance error must be > -1")
    if positionJitterStd_px < 0:
        raise ParameterError("corruptParameters: jitter must be >= 0")

    rng = np.random.default_rng([seed, 2])
    truePx = truth.positions_px
    jitter = np.zeros_like(truePx)
    if positionJitterStd_px > 0:
        jitter = rng.normal(0.0, positionJitterStd_px, size=truePx.shape)
        if len(jitter) > 1:
            jitter -= jitter.mean(axis=0)
    nominal_m = (truePx + jitter) * truth.pixelPitch_m

    K = truth.probeModes.shape[1:]
    objectShape = requiredObjectShape(truePx + jitter, K)

    if energyTarget is None:
        energyTarget = probeEnergy(truth.probeModes)
    if initFromTruth:
        obj = _placeCentered(truth.obj, objectShape)
        probe = truth.probeModes.astype(np.complex128)
    else:
        obj = np.ones(objectShape, dtype=np.complex128)
        radius = probeRadius_px if probeRadius_px is not None else min(K) / 4.0
        probe = initialProbe(K, radius, energyTarget, numModes, seed)

    return ReconstructionState(
        obj,
        probe,
        truth.distance_m * (1 + distanceError),
        0.0,
        nominal_m,
        np.zeros_like(nominal_m),
        truth.pixelPitch_m,
        energyTarget=energyTarget,
    )


def _placeCentered(source: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """
    Center-crop or pad (with ones) `source` to `shape`.
    """
    out = np.ones(shape, dtype=np.complex128)
    rows = min(shape[0], source.shape[0])
    cols = min(shape[1], source.shape[1])
    so = ((source.shape[0] - rows) // 2, (source.shape[1] - cols) // 2)
    do = ((shape[0] - rows) // 2, (shape[1] - cols) // 2)
    out[do[0]:do[0] + rows, do[1]:do[1] + cols] = source[so[0]:so[0] + rows, so[1]:so[1] + cols]
    return out


def distanceSweep(recipe: SimulationRecipe, distances_m: Sequence[float] = DISTANCE_SWEEP_M) -> List[Tuple[PtychoDataset, GroundTruth]]:
    """
    The same recipe regenerated at each propagation distance.
    """
    return [synthesizeDataset(recipe.withDistance(z)) for z in distances_m]
