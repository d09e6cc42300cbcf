"""
Free-space propagation (angular spectrum), padding policy, Fresnel scaling and the
thin-object material model.
"""

from enum import IntEnum
import functools
import math
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .Autodiff import (
    ComplexTensor,
    Variable,
    VariableLike,
    asVariable,
    add,
    cropCenter,
    cyclicPhase,
    elementwiseMul,
    expj,
    fft2,
    ifft2,
    padCenter,
)
from .const import MAX_PAD_FACTOR
from .errors import ParameterError


class PadPolicy(IntEnum):
    AUTO = 0
    FIXED = 1


class PropagationSpec():
    def __init__(
            self,
            wavelength_m: float,
            distance_m: Union[float, Variable],
            pixelPitchX_m: float,
            pixelPitchY_m: Optional[float] = None,
            padPolicy: PadPolicy = PadPolicy.AUTO,
            padPixels: int = 0,
        ):
        """
        distance_m
            Signed sample-to-detector distance. May be a scalar Variable when the
            distance is being optimized.
        padPixels
            Per-side padding used with PadPolicy.FIXED.
        """
        self.wavelength_m = float(wavelength_m)
        self.distance_m = distance_m
        self.pixelPitchX_m = float(pixelPitchX_m)
        self.pixelPitchY_m = float(pixelPitchY_m if pixelPitchY_m is not None else pixelPitchX_m)
        self.padPolicy = padPolicy
        self.padPixels = int(padPixels)

        if self.wavelength_m <= 0:
            raise ParameterError(f"Wavelength must be positive ({self.wavelength_m})")
        if self.pixelPitchX_m <= 0 or self.pixelPitchY_m <= 0:
            raise ParameterError(f"Pixel pitch must be positive ({self.pixelPitchX_m}, {self.pixelPitchY_m})")
        if self.padPixels < 0:
            raise ParameterError(f"padPixels must be >= 0 ({self.padPixels})")

    @property
    def distanceValue(self) -> float:
        if isinstance(self.distance_m, Variable):
            return float(self.distance_m.value)
        return float(self.distance_m)

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi / self.wavelength_m

    def withDistance(self, distance_m: Union[float, Variable]) -> "PropagationSpec":
        return PropagationSpec(
            self.wavelength_m,
            distance_m,
            self.pixelPitchX_m,
            self.pixelPitchY_m,
            self.padPolicy,
            self.padPixels,
        )


class ExperimentGeometry():
    def __init__(self, sourceToSample_m: float, sampleToDetector_m: float, detectorPixel_m: float, numericalAperture: Optional[float] = None):
        """
        sourceToSample_m
            Distance from the (virtual) point source to the sample; math.inf for a
            parallel beam.
        """
        self.sourceToSample_m = float(sourceToSample_m)
        self.sampleToDetector_m = float(sampleToDetector_m)
        self.detectorPixel_m = float(detectorPixel_m)
        self.numericalAperture = None if numericalAperture is None else float(numericalAperture)

        for name in ['sourceToSample_m', 'sampleToDetector_m', 'detectorPixel_m']:
            if not getattr(self, name) > 0:
                raise ParameterError(f"ExperimentGeometry: {name} must be positive")

    @classmethod
    def fromConfigDict(cls, configDict: Dict[str, Any]) -> "ExperimentGeometry":
        return cls(
            sourceToSample_m=configDict.get('sourceToSample_m', math.inf),
            sampleToDetector_m=configDict['sampleToDetector_m'],
            detectorPixel_m=configDict['detectorPixel_m'],
            numericalAperture=configDict.get('numericalAperture'),
        )

    def getJson(self):
        return {
            'sourceToSample_m': self.sourceToSample_m,
            'sampleToDetector_m': self.sampleToDetector_m,
            'detectorPixel_m': self.detectorPixel_m,
            'numericalAperture': self.numericalAperture,
        }


class MaterialMap():
    """
    Thin-object material description: refractive index n = 1 - delta + j*beta and a
    projected thickness map (meters).
    """

    def __init__(self, delta, beta, thickness_m):
        self.delta = np.asarray(delta, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)
        self.thickness_m = np.asarray(thickness_m, dtype=np.float64)

        if np.any(self.beta < 0):
            raise ParameterError("MaterialMap: beta must be >= 0")
        if np.any(self.thickness_m < 0):
            raise ParameterError("MaterialMap: thickness must be >= 0")
        try:
            np.broadcast_shapes(self.delta.shape, self.beta.shape, self.thickness_m.shape)
        except ValueError:
            raise ParameterError("MaterialMap: delta, beta and thickness shapes do not broadcast")


class ThicknessMaps():
    def __init__(self, fromPhase_m: np.ndarray, fromMagnitude_m: np.ndarray, invalidPhase: np.ndarray, invalidMagnitude: np.ndarray):
        self.fromPhase_m = fromPhase_m
        self.fromMagnitude_m = fromMagnitude_m
        self.invalidPhase = invalidPhase
        self.invalidMagnitude = invalidMagnitude

    @property
    def thickness_m(self) -> np.ndarray:
        """
        Phase-derived thickness where it is defined, magnitude-derived elsewhere.
        """
        return np.where(self.invalidPhase, self.fromMagnitude_m, self.fromPhase_m)


###################################################################
#                                                                 #
#                          Propagation                            #

@functools.lru_cache(maxsize=64)
def _filterTerms(shape: Tuple[int, int], wavelength_m: float, pixelPitchX_m: float, pixelPitchY_m: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Distance-independent parts of the transfer function on the FFT frequency grid:
    k*(q - 1) with q = sqrt(1 - (lambda fx)^2 - (lambda fy)^2), and the propagating-band mask.
    The distance is applied by the caller, so a changing z never invalidates this cache.
    """
    fy = np.fft.fftfreq(shape[0], d=pixelPitchY_m)
    fx = np.fft.fftfreq(shape[1], d=pixelPitchX_m)
    s = (wavelength_m * fy[:, None]) ** 2 + (wavelength_m * fx[None, :]) ** 2
    mask = s <= 1.0
    sp = np.where(mask, s, 0.0)
    # q - 1 without cancellation
    qMinusOne = -sp / (1.0 + np.sqrt(1.0 - sp))
    kq1 = np.where(mask, (2 * np.pi / wavelength_m) * qMinusOne, 0.0)
    maskArray = mask.astype(np.float64)
    kq1.setflags(write=False)
    maskArray.setflags(write=False)
    return kq1, maskArray


def autoPadSize(shape: Tuple[int, int], spec: PropagationSpec) -> Tuple[int, int]:
    """
    Padded field shape. AUTO pads each side by the lateral spread of the propagation
    cone, ceil(lambda*|z| / (2*d^2)), limited so the padded side never exceeds
    MAX_PAD_FACTOR times the original.
    """
    rows, cols = int(shape[0]), int(shape[1])
    if spec.padPolicy == PadPolicy.FIXED:
        return (rows + 2 * spec.padPixels, cols + 2 * spec.padPixels)

    z = abs(spec.distanceValue)
    padded = []
    for n, pitch in ((rows, spec.pixelPitchY_m), (cols, spec.pixelPitchX_m)):
        nPad = math.ceil(spec.wavelength_m * z / (2 * pitch ** 2))
        nPad = min(nPad, ((MAX_PAD_FACTOR - 1) * n) // 2)
        padded.append(n + 2 * nPad)
    return (padded[0], padded[1])


def transferFunction(shape: Tuple[int, int], spec: PropagationSpec) -> Variable:
    """
    Differentiable H(fx, fy; z) = exp(j k z q) on the propagating band, 0 elsewhere.
    The piston term k*z is wrapped separately so large k*z keep full relative precision.
    """
    kq1, mask = _filterTerms(tuple(shape), spec.wavelength_m, spec.pixelPitchX_m, spec.pixelPitchY_m)
    z = asVariable(spec.distance_m)
    phase = add(elementwiseMul(z, kq1), cyclicPhase(z, spec.wavelength_m))
    return elementwiseMul(expj(phase), mask)


def propagationFilter(shape: Tuple[int, int], spec: PropagationSpec) -> ComplexTensor:
    return transferFunction(shape, spec.withDistance(spec.distanceValue)).value


def propagate(field: VariableLike, spec: PropagationSpec, transfer: Optional[Variable] = None) -> Variable:
    """
    Angular-spectrum propagation: crop(F^-1{ F{pad(field)} * H }).

    transfer
        Precomputed transferFunction() for the padded shape; shared across a batch so
        the distance gradient accumulates in one place.
    """
    field = asVariable(field)
    shape = field.shape[-2:]
    padded = autoPadSize(shape, spec)
    if transfer is None:
        transfer = transferFunction(padded, spec)
    elif transfer.shape[-2:] != padded:
        raise ParameterError(f"propagate: transfer function shape {transfer.shape} does not match padded field {padded}")

    x = padCenter(field, padded) if padded != shape else field
    out = ifft2(elementwiseMul(fft2(x), transfer))
    if padded != shape:
        out = cropCenter(out, shape)
    return out

#                          Propagation                            #
#                                                                 #
###################################################################


def fresnelRescale(geom: ExperimentGeometry) -> Tuple[float, float, float]:
    """
    Fresnel scaling theorem: a point source at z1 before the sample and a detector at
    z2 after it are equivalent to a parallel beam with magnification M = (z1+z2)/z1,
    effective distance z2/M and effective detector pixel detectorPixel/M.

    Returns (effectiveDistance_m, magnification, effectivePixel_m).
    """
    z1 = geom.sourceToSample_m
    z2 = geom.sampleToDetector_m
    if math.isinf(z1):
        magnification = 1.0
    else:
        magnification = (z1 + z2) / z1
    return z2 / magnification, magnification, geom.detectorPixel_m / magnification


def transmissionFromMaterial(m: MaterialMap, wavelength_m: float) -> ComplexTensor:
    """
    O = exp(j (2pi/lambda) t (-delta + j beta)):
    ln|O| = -(2pi/lambda) beta t, arg O = -(2pi/lambda) delta t.
    """
    k = 2 * np.pi / wavelength_m
    return np.exp(-k * m.beta * m.thickness_m) * np.exp(-1j * k * m.delta * m.thickness_m)


def thicknessFromReconstruction(obj: ComplexTensor, delta, beta, wavelength_m: float) -> ThicknessMaps:
    """
    Invert the thin-object model. Pixels with zero delta (resp. beta) or zero
    magnitude are flagged invalid in the corresponding channel and set to NaN.
    """
    obj = np.asarray(obj)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), obj.shape)
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), obj.shape)
    k = 2 * np.pi / wavelength_m

    magnitude = np.abs(obj)
    invalidPhase = delta == 0
    invalidMagnitude = (beta == 0) | (magnitude == 0)

    fromPhase = np.full(obj.shape, np.nan)
    np.divide(-np.angle(obj), k * delta, out=fromPhase, where=~invalidPhase)

    fromMagnitude = np.full(obj.shape, np.nan)
    logMagnitude = np.log(np.where(invalidMagnitude, 1.0, magnitude))
    np.divide(-logMagnitude, k * beta, out=fromMagnitude, where=~invalidMagnitude)

    return ThicknessMaps(fromPhase, fromMagnitude, invalidPhase, invalidMagnitude)
