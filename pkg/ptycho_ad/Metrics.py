"""
Ground-truth-aware quality metrics and convergence bookkeeping.
"""

import csv
import io
import logging
import math
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from skimage.metrics import structural_similarity

from .const import (
    ABBE_COHERENT_FACTOR,
    POSITION_HISTOGRAM_BINS,
    SSIM_K1,
    SSIM_K2,
    SSIM_SIGMA,
)
from .errors import DimensionError, NumericError, ParameterError

logger = logging.getLogger(__name__)

# Side of the Gaussian SSIM window (sigma 1.5, truncated at 3.5 sigma)
SSIM_WINDOW = 2 * int(3.5 * SSIM_SIGMA + 0.5) + 1


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    The dynamic range is taken over both images together so that ssim(a, b) equals
    ssim(b, a); a range of zero (two identical constants) falls back to 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"ssim: need 2D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("ssim: images must be finite")

    dataRange = max(a.max(), b.max()) - min(a.min(), b.min())
    if dataRange <= 0:
        dataRange = 1.0

    return float(structural_similarity(
        a,
        b,
        data_range=dataRange,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
    ))


def removeAmbiguities(recon: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """
    Remove the phase ramp and the global phase separating `recon` from `truth`.

    The ramp slopes are the mean phase increments of recon * conj(truth) between
    neighbouring pixels; the constant phase is then -arg <recon, truth>.
    """
    recon = np.asarray(recon)
    truth = np.asarray(truth)
    if recon.shape != truth.shape:
        raise DimensionError(f"removeAmbiguities: shapes differ {recon.shape} vs {truth.shape}")

    aligned = recon.astype(np.complex128, copy=True)
    if not np.any(np.abs(recon) > 0):
        return aligned

    delta = aligned * np.conj(truth)
    slopeX = np.angle(np.sum(delta[:, 1:] * np.conj(delta[:, :-1]))) if recon.shape[1] > 1 else 0.0
    slopeY = np.angle(np.sum(delta[1:, :] * np.conj(delta[:-1, :]))) if recon.shape[0] > 1 else 0.0

    rows, cols = recon.shape
    y = np.arange(rows) - (rows - 1) / 2.0
    x = np.arange(cols) - (cols - 1) / 2.0
    aligned *= np.exp(-1j * (slopeX * x[None, :] + slopeY * y[:, None]))

    overlap = np.sum(aligned * np.conj(truth))
    if overlap != 0:
        aligned *= np.exp(-1j * np.angle(overlap))
    return aligned


def wrapPhase(phase: np.ndarray) -> np.ndarray:
    """
    Wrap into (-pi, pi].
    """
    wrapped = np.mod(np.asarray(phase) + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def centerCropPair(a: np.ndarray, b: np.ndarray, maxShape: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Crop two centered frames to a common centered region (optionally no larger
    than maxShape). Both frames must share the parity of their sides.
    """
    target = []
    for axis in range(2):
        na, nb = a.shape[axis], b.shape[axis]
        if (na - nb) % 2:
            raise DimensionError(f"centerCropPair: frames {a.shape} and {b.shape} do not share a center")
        n = min(na, nb)
        if maxShape is not None:
            n = min(n, int(maxShape[axis]))
            if (na - n) % 2:
                n -= 1
        target.append(max(n, 1))

    def _crop(x):
        r0 = (x.shape[0] - target[0]) // 2
        c0 = (x.shape[1] - target[1]) // 2
        return x[r0:r0 + target[0], c0:c0 + target[1]]

    return _crop(a), _crop(b)


def scanRegionShape(positions_px: np.ndarray, margin_px: float) -> Tuple[int, int]:
    """
    Centered box holding every scan position plus a margin.
    """
    positions_px = np.asarray(positions_px, dtype=np.float64).reshape(-1, 2)
    halfX = float(np.max(np.abs(positions_px[:, 0]))) + margin_px
    halfY = float(np.max(np.abs(positions_px[:, 1]))) + margin_px
    return (2 * math.ceil(halfY) + 1, 2 * math.ceil(halfX) + 1)


def compareObjects(recon: np.ndarray, truth: np.ndarray, roiShape: Optional[Tuple[int, int]] = None) -> Dict[str, float]:
    """
    SSIM of magnitude and (wrapped) phase after ambiguity removal, over the common
    centered region of the two frames.
    """
    r, t = centerCropPair(np.asarray(recon), np.asarray(truth), roiShape)
    aligned = removeAmbiguities(r, t)
    return {
        'ssimMagnitude': ssim(np.abs(aligned), np.abs(t)),
        'ssimPhase': ssim(wrapPhase(np.angle(aligned)), wrapPhase(np.angle(t))),
    }


class PositionErrorStats():
    def __init__(self, errors_px: np.ndarray, bins: int = POSITION_HISTOGRAM_BINS):
        self.errors_px = np.asarray(errors_px, dtype=np.float64)
        self.median_px = float(np.median(self.errors_px))
        self.mean_px = float(np.mean(self.errors_px))
        self.max_px = float(np.max(self.errors_px))
        self.histogramCounts, self.histogramEdges = np.histogram(self.errors_px, bins=bins)

    def getJson(self):
        return {
            'median_px': self.median_px,
            'mean_px': self.mean_px,
            'max_px': self.max_px,
        }


def positionErrorStats(estimated_px: np.ndarray, truth_px: np.ndarray, bins: int = POSITION_HISTOGRAM_BINS) -> PositionErrorStats:
    estimated_px = np.asarray(estimated_px, dtype=np.float64).reshape(-1, 2)
    truth_px = np.asarray(truth_px, dtype=np.float64).reshape(-1, 2)
    if estimated_px.shape != truth_px.shape:
        raise DimensionError(f"positionErrorStats: {len(estimated_px)} estimated vs {len(truth_px)} true positions")
    if len(truth_px) == 0:
        raise ParameterError("positionErrorStats: no positions")
    return PositionErrorStats(np.hypot(*(estimated_px - truth_px).T), bins)


###################################################################
#                                                                 #
#                          Line Profiles                          #

class LineProfile():
    def __init__(self, distance_px: np.ndarray, values: np.ndarray, width_px: float, kind: str):
        """
        kind
            'peak' (full width at half maximum), 'edge' (25-75% rise distance) or
            'flat' (width undefined, width_px is NaN).
        """
        self.distance_px = distance_px
        self.values = values
        self.width_px = width_px
        self.kind = kind

    @property
    def defined(self) -> bool:
        return self.kind != 'flat'


def _crossing(d: np.ndarray, v: np.ndarray, i: int, j: int, level: float) -> float:
    if v[j] == v[i]:
        return float(d[i])
    return float(d[i] + (level - v[i]) * (d[j] - d[i]) / (v[j] - v[i]))


def _halfMaxWidth(d: np.ndarray, v: np.ndarray, level: float) -> Optional[float]:
    peak = int(np.argmax(v))

    left = None
    for i in range(peak, 0, -1):
        if v[i - 1] < level <= v[i]:
            left = _crossing(d, v, i - 1, i, level)
            break

    right = None
    for i in range(peak, len(v) - 1):
        if v[i + 1] < level <= v[i]:
            right = _crossing(d, v, i, i + 1, level)
            break

    if left is None or right is None:
        return None
    return right - left


def _firstCrossing(d: np.ndarray, v: np.ndarray, level: float) -> Optional[float]:
    for i in range(len(v) - 1):
        if (v[i] - level) * (v[i + 1] - level) <= 0 and v[i] != v[i + 1]:
            return _crossing(d, v, i, i + 1, level)
    return None


def lineProfileFwhm(image: np.ndarray, p0: Tuple[float, float], p1: Tuple[float, float], samples: Optional[int] = None) -> LineProfile:
    """
    Bilinear profile of `image` from p0 to p1 ((x, y) pixel coordinates) and its width:
    FWHM of the dominant peak when the profile falls below half maximum on both sides
    of it, otherwise the 25-75% edge width. Crossings are linearly interpolated.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"lineProfileFwhm: image must be 2D, got {image.shape}")
    rows, cols = image.shape
    for x, y in (p0, p1):
        if not (0 <= x <= cols - 1 and 0 <= y <= rows - 1):
            raise ParameterError(f"lineProfileFwhm: endpoint ({x}, {y}) outside the image")

    length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    if samples is None:
        samples = max(int(math.ceil(length * 4)) + 1, 2)
    if samples < 2:
        raise ParameterError("lineProfileFwhm: at least two samples are required")

    s = np.linspace(0.0, 1.0, samples)
    xs = p0[0] + s * (p1[0] - p0[0])
    ys = p0[1] + s * (p1[1] - p0[1])
    values = ndimage.map_coordinates(image, [ys, xs], order=1, mode='nearest')
    distance = s * length

    vMin, vMax = float(values.min()), float(values.max())
    if vMax - vMin <= 1e-12 * max(1.0, abs(vMax)):
        logger.info("Line profile is flat; width undefined")
        return LineProfile(distance, values, math.nan, 'flat')

    width = _halfMaxWidth(distance, values, vMin + 0.5 * (vMax - vMin))
    if width is not None:
        return LineProfile(distance, values, width, 'peak')

    x25 = _firstCrossing(distance, values, vMin + 0.25 * (vMax - vMin))
    x75 = _firstCrossing(distance, values, vMin + 0.75 * (vMax - vMin))
    if x25 is None or x75 is None:
        return LineProfile(distance, values, math.nan, 'flat')
    return LineProfile(distance, values, abs(x75 - x25), 'edge')

#                          Line Profiles                          #
#                                                                 #
###################################################################


def abbeLimit(wavelength_m: float, numericalAperture: float) -> float:
    """
    Coherent-illumination resolution 0.82 * lambda / NA.
    """
    if not numericalAperture > 0:
        raise ParameterError(f"abbeLimit: NA must be > 0 ({numericalAperture})")
    return ABBE_COHERENT_FACTOR * wavelength_m / numericalAperture


def numericalApertureFor(wavelength_m: float, resolution_m: float) -> float:
    if not resolution_m > 0:
        raise ParameterError(f"numericalApertureFor: resolution must be > 0 ({resolution_m})")
    return ABBE_COHERENT_FACTOR * wavelength_m / resolution_m


###################################################################
#                                                                 #
#                       Convergence History                       #

HISTORY_COLUMNS = (
    'epoch',
    'loss',
    'dataFidelity',
    'regularization',
    'distance_m',
    'learningRateScale',
    'positionErrorMedian_px',
    'positionErrorMean_px',
    'positionErrorMax_px',
    'ssimMagnitude',
    'ssimPhase',
)


class EpochRecord():
    def __init__(
            self,
            epoch: int,
            loss: float,
            dataFidelity: float,
            regularization: float,
            distance_m: float,
            learningRateScale: float = 1.0,
            positionErrorMedian_px: float = math.nan,
            positionErrorMean_px: float = math.nan,
            positionErrorMax_px: float = math.nan,
            ssimMagnitude: float = math.nan,
            ssimPhase: float = math.nan,
        ):
        """
        learningRateScale
            Factor applied to every group's learning rate during this epoch.
        """
        self.epoch = int(epoch)
        self.loss = float(loss)
        self.dataFidelity = float(dataFidelity)
        self.regularization = float(regularization)
        self.distance_m = float(distance_m)
        self.learningRateScale = float(learningRateScale)
        self.positionErrorMedian_px = float(positionErrorMedian_px)
        self.positionErrorMean_px = float(positionErrorMean_px)
        self.positionErrorMax_px = float(positionErrorMax_px)
        self.ssimMagnitude = float(ssimMagnitude)
        self.ssimPhase = float(ssimPhase)

    def getJson(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in HISTORY_COLUMNS}


class ConvergenceHistory():
    def __init__(self, records: Optional[List[EpochRecord]] = None):
        self.records: List[EpochRecord] = []
        for r in records or []:
            self.append(r)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ParameterError(f"ConvergenceHistory: epoch {record.epoch} after {self.records[-1].epoch}")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        if name not in HISTORY_COLUMNS:
            raise ParameterError(f"ConvergenceHistory: unknown column '{name}'")
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def toArray(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, len(HISTORY_COLUMNS)))
        return np.array([[getattr(r, k) for k in HISTORY_COLUMNS] for r in self.records], dtype=np.float64)

    @classmethod
    def fromArray(cls, array: np.ndarray) -> "ConvergenceHistory":
        array = np.asarray(array, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))
        return cls([EpochRecord(*row) for row in array])

    def toCsv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(HISTORY_COLUMNS)
        for r in self.records:
            writer.writerow([r.epoch] + [repr(getattr(r, k)) for k in HISTORY_COLUMNS[1:]])
        return buffer.getvalue()


def normalisedSsim(history: ConvergenceHistory, channel: str = 'ssimMagnitude') -> np.ndarray:
    """
    SSIM curve divided by its final-epoch value (plotting aid).
    """
    values = history.column(channel)
    if len(values) == 0 or not np.isfinite(values[-1]) or values[-1] == 0:
        return np.full(len(values), math.nan)
    return values / values[-1]

#                       Convergence History                       #
#                                                                 #
###################################################################
