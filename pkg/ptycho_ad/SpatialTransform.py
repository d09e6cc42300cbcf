"""
Differentiable sub-pixel cropping: affine grid generator and bilinear sampler.

Normalized coordinates follow align-corners semantics: -1 is the center of the first
pixel and +1 the center of the last one along each axis. Samples falling outside the
source contribute zero.
"""

from typing import Tuple

import numpy as np

from .Autodiff import (
    Variable,
    VariableLike,
    add,
    asVariable,
    index,
    recordOp,
    scale,
    stack,
)
from .errors import DimensionError, ParameterError


class AffineParams():
    def __init__(self, scaleX: float, scaleY: float, translation: VariableLike):
        """
        scaleX / scaleY
            Constant scales in (0, 1], selecting the size of the cropped region.
        translation
            (2,) [tx, ty] in normalized coordinates; the only learnable part.
        """
        self.scaleX = float(scaleX)
        self.scaleY = float(scaleY)
        self.translation = asVariable(translation)

        if not (0 < self.scaleX <= 1 and 0 < self.scaleY <= 1):
            raise ParameterError(f"AffineParams: scales must be in (0, 1], got ({self.scaleX}, {self.scaleY})")
        if self.translation.shape != (2,):
            raise DimensionError(f"AffineParams: translation must have shape (2,), got {self.translation.shape}")
        if not np.all(np.isfinite(self.translation.value)):
            raise ParameterError("AffineParams: translation must be finite")

    @classmethod
    def forCrop(cls, cropShape: Tuple[int, int], sourceShape: Tuple[int, int], translation: VariableLike) -> "AffineParams":
        """
        Scales that keep the crop sampling at one source pixel per output pixel.
        """
        def _scale(k, n):
            return 1.0 if n <= 1 else (k - 1) / (n - 1)
        return cls(_scale(cropShape[1], sourceShape[1]), _scale(cropShape[0], sourceShape[0]), translation)


class SamplingGrid():
    """
    Source coordinates per output pixel: grid[..., 0] = x, grid[..., 1] = y.
    """

    def __init__(self, grid: Variable):
        if grid.ndim != 3 or grid.shape[-1] != 2:
            raise DimensionError(f"SamplingGrid: expected (rows, cols, 2), got {grid.shape}")
        self.grid = grid

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape[:2]


def kernelK1(t):
    """
    Triangular interpolation kernel max(0, 1 - |t|).
    """
    return np.maximum(0.0, 1.0 - np.abs(t))


def _regularAxis(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def generateGrid(p: AffineParams, outShape: Tuple[int, int]) -> SamplingGrid:
    """
    (x_o, y_o) = [[sx, 0, tx], [0, sy, ty]] (x_i, y_i, 1) over a regular grid spanning
    [-1, 1]; differentiable w.r.t. tx, ty.
    """
    rows, cols = int(outShape[0]), int(outShape[1])
    if rows < 1 or cols < 1:
        raise DimensionError(f"generateGrid: output shape must be positive, got {outShape}")

    yi, xi = np.meshgrid(_regularAxis(rows), _regularAxis(cols), indexing='ij')
    gx = add(scale(xi, p.scaleX), index(p.translation, 0))
    gy = add(scale(yi, p.scaleY), index(p.translation, 1))
    return SamplingGrid(stack([gx, gy], axis=-1))


def bilinearSample(U: VariableLike, grid: SamplingGrid) -> Variable:
    """
    V = sum_{h,w} U[h, w] * K1(w - x) * K1(h - y) at each grid point, with the same
    grid applied to the real and imaginary channels. Gradients flow to U (transpose
    scatter of the weights) and to the grid.
    """
    U = asVariable(U)
    if U.ndim != 2:
        raise DimensionError(f"bilinearSample: source must be 2D, got {U.shape}")
    gridVar = grid.grid
    H, W = U.shape
    source = U.value
    g = gridVar.value

    halfW = 0.5 * (W - 1)
    halfH = 0.5 * (H - 1)
    u = (g[..., 0] + 1.0) * halfW
    v = (g[..., 1] + 1.0) * halfH
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    wx = u - x0
    wy = v - y0

    taps = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ys = y0 + dy
        xs = x0 + dx
        valid = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
        yc = np.clip(ys, 0, H - 1)
        xc = np.clip(xs, 0, W - 1)
        values = np.where(valid, source[yc, xc], 0)
        taps.append((yc * W + xc, valid, values))

    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    weights = (w00, w01, w10, w11)

    v00, v01, v10, v11 = (t[2] for t in taps)
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def _adjoint(gOut):
        flat = np.concatenate([t[0].ravel() for t in taps])
        contrib = np.concatenate([(gOut * w * t[1]).ravel() for w, t in zip(weights, taps)])
        gU = np.bincount(flat, weights=contrib.real, minlength=H * W)
        if np.iscomplexobj(contrib):
            gU = gU + 1j * np.bincount(flat, weights=contrib.imag, minlength=H * W)
        gU = gU.reshape(H, W)

        dOutDu = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        dOutDv = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        gGrid = np.stack([
            gOut * np.conj(dOutDu) * halfW,
            gOut * np.conj(dOutDv) * halfH,
        ], axis=-1)
        return (gU, gGrid)

    return recordOp('bilinearSample', out, (U, gridVar), _adjoint)


def cropWindow(U: VariableLike, translation: VariableLike, cropShape: Tuple[int, int]) -> Variable:
    """
    Crop of `cropShape` pixels centered at `translation` (normalized) inside U.
    """
    U = asVariable(U)
    params = AffineParams.forCrop(cropShape, U.shape, translation)
    return bilinearSample(U, generateGrid(params, cropShape))
