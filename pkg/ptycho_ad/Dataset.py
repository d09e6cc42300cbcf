"""
PtychoDataset container: a YAML manifest next to a raw payload of little-endian
float32 frames (row-major, pattern-major, dark frames appended), plus the optional
ground-truth sidecar written for simulated data.

Manifest keys:

    format: ptycho-ad-dataset
    version: 1
    wavelength_m, distance_m, pixelPitch_m
    patternShape: [rows, cols]
    numPatterns, numDarkFrames
    positions_m: [[x, y], ...]      # crop centers relative to the object center
    payload: <file name>            # relative to the manifest
    payloadBytes, sha256
    notes: {...}                    # free-form provenance
    geometry: {...}                 # optional, ExperimentGeometry for point-source data
"""

import hashlib
import logging
import os
from typing import Any, Dict, Optional

import numpy as np
from PIL import Image, ImageSequence
import yaml

from .Optics import ExperimentGeometry
from .const import DATASET_FORMAT_TAG, DATASET_FORMAT_VERSION
from .errors import (
    DatasetChecksumError,
    DatasetFormatError,
    DatasetShapeError,
    DatasetTruncatedError,
)
from .ImageExport import atomicWrite, saveArrays, writeYaml

logger = logging.getLogger(__name__)

PAYLOAD_DTYPE = np.dtype('<f4')


class PtychoDataset():
    def __init__(
            self,
            patterns: np.ndarray,
            wavelength_m: float,
            distance_m: float,
            pixelPitch_m: float,
            positions_m: np.ndarray,
            darks: Optional[np.ndarray] = None,
            notes: Optional[Dict[str, Any]] = None,
            geometry: Optional[ExperimentGeometry] = None,
        ):
        """
        patterns
            (J, rows, cols) measured intensities.
        distance_m
            Sample-to-detector distance as believed at acquisition (the initial z).
        """
        self.patterns = np.asarray(patterns)
        self.wavelength_m = float(wavelength_m)
        self.distance_m = float(distance_m)
        self.pixelPitch_m = float(pixelPitch_m)
        self.positions_m = np.asarray(positions_m, dtype=np.float64).reshape(-1, 2)
        self.darks = None if darks is None else np.asarray(darks)
        self.notes = dict(notes or {})
        self.geometry = geometry

        if self.patterns.ndim != 3:
            raise DatasetShapeError(f"Patterns must be (J, rows, cols), got {self.patterns.shape}")
        if len(self.positions_m) != len(self.patterns):
            raise DatasetShapeError(f"{len(self.patterns)} patterns but {len(self.positions_m)} positions")
        if self.darks is not None and (self.darks.ndim != 3 or self.darks.shape[1:] != self.patterns.shape[1:]):
            raise DatasetShapeError(f"Dark frames {self.darks.shape} do not match patterns {self.patterns.shape}")

    @property
    def numPatterns(self) -> int:
        return len(self.patterns)

    @property
    def patternShape(self):
        return tuple(self.patterns.shape[1:])

    def correctedPatterns(self) -> np.ndarray:
        """
        Dark-field corrected intensities (the input of a reconstruction).
        """
        if self.darks is None or len(self.darks) == 0:
            return np.array(self.patterns, dtype=np.float64)
        return darkFieldCorrect(self.patterns, self.darks)


def darkFieldCorrect(frames: np.ndarray, darks: Optional[np.ndarray]) -> np.ndarray:
    """
    max(frame - mean(darks), 0) for every frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if darks is None or len(darks) == 0:
        logger.warning("No dark frames available; dark-field correction skipped")
        return frames.copy()
    darks = np.asarray(darks, dtype=np.float64)
    if darks.shape[1:] != frames.shape[-2:]:
        raise DatasetShapeError(f"Dark frames {darks.shape} do not match frames {frames.shape}")
    return np.maximum(frames - darks.mean(axis=0), 0.0)


def _payloadPath(manifestPath: str) -> str:
    root, _ = os.path.splitext(manifestPath)
    return root + '.bin'


def saveDataset(dataset: PtychoDataset, manifestPath: str) -> None:
    payload = dataset.patterns.astype(PAYLOAD_DTYPE).tobytes(order='C')
    numDarks = 0
    if dataset.darks is not None:
        payload += dataset.darks.astype(PAYLOAD_DTYPE).tobytes(order='C')
        numDarks = len(dataset.darks)

    payloadPath = _payloadPath(manifestPath)
    manifest = {
        'format': DATASET_FORMAT_TAG,
        'version': DATASET_FORMAT_VERSION,
        'wavelength_m': dataset.wavelength_m,
        'distance_m': dataset.distance_m,
        'pixelPitch_m': dataset.pixelPitch_m,
        'patternShape': [int(n) for n in dataset.patternShape],
        'numPatterns': dataset.numPatterns,
        'numDarkFrames': numDarks,
        'positions_m': dataset.positions_m.tolist(),
        'payload': os.path.basename(payloadPath),
        'payloadBytes': len(payload),
        'sha256': hashlib.sha256(payload).hexdigest(),
        'notes': dataset.notes,
    }
    if dataset.geometry is not None:
        manifest['geometry'] = dataset.geometry.getJson()

    atomicWrite(payloadPath, payload)
    writeYaml(manifestPath, manifest)
    logger.info(f"Saved dataset {manifestPath}: {dataset.numPatterns} patterns of {dataset.patternShape}")


def loadDataset(manifestPath: str) -> PtychoDataset:
    with open(manifestPath, 'r') as F_MANIFEST:
        try:
            manifest = yaml.safe_load(F_MANIFEST)
        except yaml.YAMLError as e:
            raise DatasetFormatError(f"{manifestPath}: manifest is not valid YAML ({e})")

    if not isinstance(manifest, dict) or manifest.get('format') != DATASET_FORMAT_TAG:
        raise DatasetFormatError(f"{manifestPath}: not a {DATASET_FORMAT_TAG} manifest")
    if manifest.get('version') != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(f"{manifestPath}: unsupported format version {manifest.get('version')}")

    try:
        rows, cols = (int(n) for n in manifest['patternShape'])
        numPatterns = int(manifest['numPatterns'])
        numDarks = int(manifest.get('numDarkFrames', 0))
        positions = np.array(manifest['positions_m'], dtype=np.float64).reshape(-1, 2)
        payloadName = manifest['payload']
        expectedSha = manifest['sha256']
        wavelength_m = float(manifest['wavelength_m'])
        distance_m = float(manifest['distance_m'])
        pixelPitch_m = float(manifest['pixelPitch_m'])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"{manifestPath}: malformed manifest ({e})")

    if len(positions) != numPatterns:
        raise DatasetShapeError(f"{manifestPath}: {numPatterns} patterns but {len(positions)} positions")

    payloadPath = os.path.join(os.path.dirname(os.path.abspath(manifestPath)), payloadName)
    with open(payloadPath, 'rb') as F_PAYLOAD:
        payload = F_PAYLOAD.read()

    frameBytes = rows * cols * PAYLOAD_DTYPE.itemsize
    expectedBytes = (numPatterns + numDarks) * frameBytes
    if len(payload) < expectedBytes:
        raise DatasetTruncatedError(f"{payloadPath}: {len(payload)} bytes, expected {expectedBytes}")
    if len(payload) != expectedBytes or manifest.get('payloadBytes', expectedBytes) != expectedBytes:
        raise DatasetShapeError(f"{payloadPath}: {len(payload)} bytes, expected {expectedBytes}")
    if hashlib.sha256(payload).hexdigest() != expectedSha:
        raise DatasetChecksumError(f"{payloadPath}: checksum mismatch")

    data = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(numPatterns + numDarks, rows, cols)
    patterns = data[:numPatterns].astype(np.float64)
    darks = data[numPatterns:].astype(np.float64) if numDarks else None

    geometry = None
    if manifest.get('geometry'):
        geometry = ExperimentGeometry.fromConfigDict(manifest['geometry'])

    return PtychoDataset(
        patterns,
        wavelength_m,
        distance_m,
        pixelPitch_m,
        positions,
        darks=darks,
        notes=manifest.get('notes') or {},
        geometry=geometry,
    )


def _readTiffFrames(path: str) -> np.ndarray:
    with Image.open(path) as image:
        frames = [np.array(frame, dtype=np.float64) for frame in ImageSequence.Iterator(image)]
    if not frames:
        raise DatasetFormatError(f"{path}: no frames")
    return np.stack(frames, axis=0)


def importTiff(
        path: str,
        wavelength_m: float,
        distance_m: float,
        pixelPitch_m: float,
        positions_m: np.ndarray,
        darkPath: Optional[str] = None,
    ) -> PtychoDataset:
    """
    Multipage (16-bit) TIFF stack, one page per scan position, into a PtychoDataset.
    """
    patterns = _readTiffFrames(path)
    darks = _readTiffFrames(darkPath) if darkPath else None
    return PtychoDataset(
        patterns,
        wavelength_m,
        distance_m,
        pixelPitch_m,
        positions_m,
        darks=darks,
        notes={'source': os.path.basename(path)},
    )


###################################################################
#                                                                 #
#                       Ground-truth sidecar                      #

class GroundTruth():
    def __init__(self, obj: np.ndarray, probeModes: np.ndarray, distance_m: float, positions_m: np.ndarray, pixelPitch_m: float, wavelength_m: float):
        """
        probeModes
            (M, rows, cols) true probe modes.
        positions_m
            (J, 2) true crop centers.
        """
        self.obj = np.asarray(obj)
        self.probeModes = np.asarray(probeModes)
        if self.probeModes.ndim == 2:
            self.probeModes = self.probeModes[None]
        self.distance_m = float(distance_m)
        self.positions_m = np.asarray(positions_m, dtype=np.float64).reshape(-1, 2)
        self.pixelPitch_m = float(pixelPitch_m)
        self.wavelength_m = float(wavelength_m)

    @property
    def positions_px(self) -> np.ndarray:
        return self.positions_m / self.pixelPitch_m


def saveTruth(truth: GroundTruth, path: str) -> None:
    saveArrays(path, {
        'object': truth.obj,
        'probeModes': truth.probeModes,
        'distance_m': np.array(truth.distance_m),
        'positions_m': truth.positions_m,
        'pixelPitch_m': np.array(truth.pixelPitch_m),
        'wavelength_m': np.array(truth.wavelength_m),
    })


def loadTruth(path: str) -> GroundTruth:
    try:
        with np.load(path, allow_pickle=False) as data:
            return GroundTruth(
                data['object'],
                data['probeModes'],
                float(data['distance_m']),
                data['positions_m'],
                float(data['pixelPitch_m']),
                float(data['wavelength_m']),
            )
    except KeyError as e:
        raise DatasetFormatError(f"{path}: missing ground-truth entry {e}")

#                       Ground-truth sidecar                      #
#                                                                 #
###################################################################
