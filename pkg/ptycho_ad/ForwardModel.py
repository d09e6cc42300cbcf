"""
Ptychography forward model: probe modes times sub-pixel object crops, propagated to
the detector and summed incoherently in intensity.

Frames: scan positions are crop centers in meters, relative to the center of the
object array; x runs along columns, y along rows. Positions convert to normalized
translations t = 2 * pos_px / (D_px - 1) for an object D_px pixels wide.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .Autodiff import (
    Variable,
    VariableLike,
    add,
    asVariable,
    elementwiseMul,
    index,
    modulusSquared,
    stack,
)
from .Optics import PropagationSpec, autoPadSize, propagate, transferFunction
from .SpatialTransform import cropWindow
from .errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)


class ProbeModes():
    def __init__(self, modes: Sequence[VariableLike]):
        self.modes: List[Variable] = [asVariable(m) for m in modes]
        if not self.modes:
            raise ParameterError("ProbeModes: at least one mode is required")
        shapes = {m.shape for m in self.modes}
        if len(shapes) != 1:
            raise DimensionError(f"ProbeModes: all modes must share one shape, got {sorted(shapes)}")
        if self.modes[0].ndim != 2:
            raise DimensionError(f"ProbeModes: modes must be 2D, got {self.modes[0].shape}")

    @classmethod
    def fromArrays(cls, arrays: Sequence[np.ndarray], requiresGrad: bool = False) -> "ProbeModes":
        return cls([Variable(np.asarray(a), requiresGrad=requiresGrad, name=f"probe{i}") for i, a in enumerate(arrays)])

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.modes[0].shape

    def values(self) -> List[np.ndarray]:
        return [m.value for m in self.modes]


class ObjectMap():
    def __init__(self, obj: VariableLike):
        self.obj = asVariable(obj)
        if self.obj.ndim != 2:
            raise DimensionError(f"ObjectMap: object must be 2D, got {self.obj.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.obj.shape


def requiredObjectShape(positions_px: np.ndarray, probeShape: Tuple[int, int]) -> Tuple[int, int]:
    """
    Smallest centered box containing every window plus a probe-radius margin.
    D - K is kept even so integer positions land exactly on pixel centers.
    """
    positions_px = np.asarray(positions_px, dtype=np.float64).reshape(-1, 2)
    shape = []
    for axis, k in ((1, probeShape[0]), (0, probeShape[1])):
        maxAbs = float(np.max(np.abs(positions_px[:, axis]))) if len(positions_px) else 0.0
        shape.append(int(k + 2 * math.ceil(maxAbs + k / 2)))
    return (shape[0], shape[1])


class ScanSet():
    def __init__(self, nominal_m: np.ndarray, pixelPitch_m: float, corrections: Optional[VariableLike] = None):
        """
        nominal_m
            (J, 2) nominal crop centers [x, y] in meters.
        corrections
            (J, 2) learnable additive corrections [tx, ty] in normalized units;
            zero when omitted.
        """
        self.nominal_m = np.asarray(nominal_m, dtype=np.float64).reshape(-1, 2)
        self.pixelPitch_m = float(pixelPitch_m)
        if len(self.nominal_m) < 1:
            raise ParameterError("ScanSet: at least one position is required")
        if self.pixelPitch_m <= 0:
            raise ParameterError("ScanSet: pixel pitch must be positive")
        if corrections is None:
            corrections = np.zeros_like(self.nominal_m)
        self.corrections = asVariable(corrections)
        if self.corrections.shape != self.nominal_m.shape:
            raise DimensionError(f"ScanSet: corrections shape {self.corrections.shape} != {self.nominal_m.shape}")

    def __len__(self) -> int:
        return len(self.nominal_m)

    @property
    def nominal_px(self) -> np.ndarray:
        return self.nominal_m / self.pixelPitch_m

    def objectShapeFor(self, probeShape: Tuple[int, int]) -> Tuple[int, int]:
        return requiredObjectShape(self.nominal_px, probeShape)

    @staticmethod
    def _halfExtent(objectShape: Tuple[int, int]) -> np.ndarray:
        # [x, y] half extents in pixels
        return np.array([max(objectShape[1] - 1, 1) / 2.0, max(objectShape[0] - 1, 1) / 2.0])

    def nominalTranslations(self, objectShape: Tuple[int, int]) -> np.ndarray:
        return self.nominal_px / self._halfExtent(objectShape)

    def correctionsPx(self, objectShape: Tuple[int, int]) -> np.ndarray:
        return self.corrections.value * self._halfExtent(objectShape)

    def estimated_px(self, objectShape: Tuple[int, int]) -> np.ndarray:
        return self.nominal_px + self.correctionsPx(objectShape)

    def translation(self, j: int, objectShape: Tuple[int, int]) -> Variable:
        return add(self.nominalTranslations(objectShape)[j], index(self.corrections, j))


def outOfBoundsWindows(scan: ScanSet, objectShape: Tuple[int, int], probeShape: Tuple[int, int]) -> np.ndarray:
    """
    (J,) flags for windows reaching outside the object array.
    """
    centers = scan.estimated_px(objectShape)
    halfObject = np.array([(objectShape[1] - 1) / 2.0, (objectShape[0] - 1) / 2.0])
    halfProbe = np.array([(probeShape[1] - 1) / 2.0, (probeShape[0] - 1) / 2.0])
    return np.any(np.abs(centers) + halfProbe > halfObject + 1e-9, axis=1)


def exitWave(P: VariableLike, objectCrop: VariableLike) -> Variable:
    P, objectCrop = asVariable(P), asVariable(objectCrop)
    if P.shape != objectCrop.shape:
        raise DimensionError(f"exitWave: probe {P.shape} and object crop {objectCrop.shape} differ")
    return elementwiseMul(P, objectCrop)


def _batchTransfer(probe: ProbeModes, spec: PropagationSpec) -> Variable:
    return transferFunction(autoPadSize(probe.shape, spec), spec)


def simulateIntensity(
        probe: ProbeModes,
        obj: ObjectMap,
        scan: ScanSet,
        j: int,
        spec: PropagationSpec,
        transfer: Optional[Variable] = None,
    ) -> Variable:
    """
    I_j = sum_p |propagate(P_p * crop(O, pos_j))|^2, differentiable w.r.t. O, every
    P_p, the distance (when spec.distance_m is a Variable) and the corrections of j.
    """
    if not 0 <= j < len(scan):
        raise ParameterError(f"simulateIntensity: position index {j} outside [0, {len(scan)})")
    if outOfBoundsWindows(scan, obj.shape, probe.shape)[j]:
        logger.debug(f"Scan window {j} reaches outside the object; outside samples contribute zero")

    if transfer is None:
        transfer = _batchTransfer(probe, spec)

    objectCrop = cropWindow(obj.obj, scan.translation(j, obj.shape), probe.shape)

    intensity: Optional[Variable] = None
    for mode in probe.modes:
        detector = propagate(exitWave(mode, objectCrop), spec, transfer)
        modeIntensity = modulusSquared(detector)
        intensity = modeIntensity if intensity is None else add(intensity, modeIntensity)
    return intensity


def simulateBatch(probe: ProbeModes, obj: ObjectMap, scan: ScanSet, indices: Union[Sequence[int], np.ndarray], spec: PropagationSpec) -> Variable:
    """
    Stacked (B, rows, cols) intensities in the order of `indices` (duplicates allowed).
    The transfer function is built once and shared by the whole batch.
    """
    transfer = _batchTransfer(probe, spec)
    return stack([simulateIntensity(probe, obj, scan, int(j), spec, transfer) for j in indices], axis=0)
