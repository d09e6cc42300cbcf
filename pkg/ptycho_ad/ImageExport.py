"""
Output writers. Every file is written to a temporary sibling first and moved into
place with os.replace, so readers never see a partial file.
"""

import io
import logging
import os
import tempfile
import zipfile
from typing import Any, Dict

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import yaml

logger = logging.getLogger(__name__)


def atomicWrite(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmpPath = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as F_TMP:
            F_TMP.write(data)
        os.replace(tmpPath, path)
    except BaseException:
        if os.path.exists(tmpPath):
            os.unlink(tmpPath)
        raise
    logger.debug(f"Wrote {path} ({len(data)} bytes)")


def atomicWriteText(path: str, text: str) -> None:
    atomicWrite(path, text.encode('utf-8'))


def writeYaml(path: str, data: Dict[str, Any]) -> None:
    atomicWriteText(path, yaml.safe_dump(data, sort_keys=False))


def _npyBytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, np.asarray(array), allow_pickle=False)
    return buffer.getvalue()


def saveArray(path: str, array: np.ndarray) -> None:
    atomicWrite(path, _npyBytes(array))


def saveArrays(path: str, arrays: Dict[str, np.ndarray]) -> None:
    """
    .npz archive readable by np.load. Entries carry a fixed timestamp so identical
    arrays give identical files.
    """
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, 'w', compression=zipfile.ZIP_STORED) as F_ZIP:
        for name, array in arrays.items():
            F_ZIP.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), _npyBytes(array))
    atomicWrite(path, buffer.getvalue())


def _imageBytes(image: np.ndarray, cmap: str, vmin: float, vmax: float) -> bytes:
    buffer = io.BytesIO()
    plt.imsave(buffer, image, cmap=cmap, vmin=vmin, vmax=vmax, format='png')
    return buffer.getvalue()


def saveMagnitudePng(path: str, field: np.ndarray) -> None:
    """
    |field| mapped linearly from 0 to its maximum, grayscale.
    """
    magnitude = np.abs(field)
    vmax = float(magnitude.max()) if magnitude.size and magnitude.max() > 0 else 1.0
    atomicWrite(path, _imageBytes(magnitude, 'gray', 0.0, vmax))


def savePhasePng(path: str, field: np.ndarray) -> None:
    """
    arg(field) on a cyclic colormap over (-pi, pi].
    """
    atomicWrite(path, _imageBytes(np.angle(field), 'twilight', -np.pi, np.pi))


def saveComplexPngs(prefix: str, field: np.ndarray) -> None:
    saveMagnitudePng(f"{prefix}-magnitude.png", field)
    savePhasePng(f"{prefix}-phase.png", field)
