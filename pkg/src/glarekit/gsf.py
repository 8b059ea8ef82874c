"""Parametric glare spread function and Fourier-domain glare simulation.

The glare model is a radially symmetric kernel made of a point mass on the
centre pixel plus a stretched-exponential tail::

    g(r) = p1 * delta(r) + p2 * exp(-p3 * r ** p4)

Kernels are rasterised on a canvas twice the size of the image they act on,
so that light from any pixel can reach any other pixel.  Images are embedded
in the centre of a zero canvas of the same size before the spectra are
multiplied; the zeros stand in for a perfect lens hood and stop the circular
convolution from wrapping glare around the frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import KernelError, ParameterError

__all__ = [
    "GsfParams",
    "GsfKernel",
    "eval_gsf",
    "rasterize_kernel",
    "pad_image",
    "crop_image",
    "simulate_glare",
    "convolve_canvas",
    "load_params",
    "save_params",
]


@dataclass(frozen=True)
class GsfParams:
    """The four glare model parameters.

    ``p1`` is the spike mass, ``p2`` the tail amplitude, ``p3`` the decay
    rate and ``p4`` the decay exponent.
    """

    p1: float
    p2: float
    p3: float
    p4: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ParameterError(f"non-finite GSF parameters: {self}")
        if self.p1 <= 0 or self.p2 < 0 or self.p3 <= 0 or self.p4 <= 0:
            raise ParameterError(
                f"GSF parameters out of domain (need p1>0, p2>=0, p3>0, p4>0): {self}"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.p1, self.p2, self.p3, self.p4], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "GsfParams":
        p1, p2, p3, p4 = (float(v) for v in arr)
        return cls(p1, p2, p3, p4)

    def to_dict(self) -> dict:
        return {"p1": self.p1, "p2": self.p2, "p3": self.p3, "p4": self.p4}

    @classmethod
    def from_dict(cls, d: dict) -> "GsfParams":
        try:
            return cls(float(d["p1"]), float(d["p2"]), float(d["p3"]), float(d["p4"]))
        except KeyError as exc:
            raise ParameterError(f"missing GSF parameter {exc}") from None


def load_params(path) -> GsfParams:
    with open(path) as fh:
        return GsfParams.from_dict(json.load(fh))


def save_params(params: GsfParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2) + "\n")


def eval_gsf(params: GsfParams, r):
    """Evaluate the continuous model at distance ``r`` (pixels).

    At ``r == 0`` the spike is reported as ``p1`` added to the tail value,
    which is how the centre pixel is rasterised.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("r must be non-negative")
    tail = params.p2 * np.exp(-params.p3 * r**params.p4)
    out = np.where(r == 0, params.p1 + tail, tail)
    return out if out.ndim else float(out)


def _radius_grid(width: int, height: int) -> np.ndarray:
    yy = np.arange(2 * height, dtype=float) - height
    xx = np.arange(2 * width, dtype=float) - width
    return np.hypot(yy[:, None], xx[None, :])


@dataclass(frozen=True, eq=False)
class GsfKernel:
    """Rasterised, unit-sum kernel on a ``2H x 2W`` canvas.

    The kernel centre sits at row ``base_height`` and column ``base_width``.
    ``mass`` keeps the sum of the raster before normalisation, which is the
    absolute light transfer of the unnormalised model.
    """

    params: GsfParams
    base_width: int
    base_height: int
    spatial: np.ndarray
    mass: float
    spectrum: np.ndarray = field(repr=False)

    @property
    def canvas_shape(self) -> tuple[int, int]:
        return (2 * self.base_height, 2 * self.base_width)

    @property
    def base_shape(self) -> tuple[int, int]:
        return (self.base_height, self.base_width)

    def centered_crop(self) -> np.ndarray:
        """The ``H x W`` window of the kernel centred on its peak."""
        h, w = self.base_height, self.base_width
        oy, ox = h // 2, w // 2
        return self.spatial[h - oy : 2 * h - oy, w - ox : 2 * w - ox]

    def at_offset(self, dy, dx):
        """Kernel weight for a displacement ``(dy, dx)`` in pixels."""
        return self.spatial[self.base_height + np.asarray(dy), self.base_width + np.asarray(dx)]


def rasterize_kernel(params: GsfParams, width: int, height: int) -> GsfKernel:
    if width <= 0 or height <= 0:
        raise ValueError("kernel base dimensions must be positive")
    r = _radius_grid(width, height)
    with np.errstate(over="ignore", invalid="ignore"):
        grid = params.p2 * np.exp(-params.p3 * r**params.p4)
    grid[height, width] = params.p1 + params.p2
    mass = float(grid.sum())
    if not np.all(np.isfinite(grid)) or not np.isfinite(mass) or mass <= 0:
        raise ParameterError(f"parameters give a non-finite kernel: {params}")
    grid /= mass
    spectrum = np.fft.rfft2(np.fft.ifftshift(grid))
    grid.flags.writeable = False
    spectrum.flags.writeable = False
    return GsfKernel(params, int(width), int(height), grid, mass, spectrum)


def pad_image(img: np.ndarray) -> np.ndarray:
    """Embed a 2-D image in the centre of a zero canvas twice its size."""
    h, w = img.shape
    canvas = np.zeros((2 * h, 2 * w), dtype=float)
    canvas[h // 2 : h // 2 + h, w // 2 : w // 2 + w] = img
    return canvas


def crop_image(canvas: np.ndarray, height: int, width: int) -> np.ndarray:
    return canvas[height // 2 : height // 2 + height, width // 2 : width // 2 + width]


def _check_dims(img: np.ndarray, kernel: GsfKernel) -> None:
    if img.shape[:2] != kernel.base_shape:
        raise KernelError(
            f"image is {img.shape[0]}x{img.shape[1]} but kernel was built for "
            f"{kernel.base_height}x{kernel.base_width}"
        )


def convolve_canvas(img2d: np.ndarray, kernel: GsfKernel, filt=None) -> np.ndarray:
    """Zero-pad, multiply spectra by ``filt`` (the kernel spectrum by default)
    and crop back.  No clamping; callers decide how to treat ringing."""
    h, w = img2d.shape
    spec = np.fft.rfft2(pad_image(img2d))
    spec *= kernel.spectrum if filt is None else filt
    full = np.fft.irfft2(spec, s=(2 * h, 2 * w))
    return crop_image(full, h, w).copy()


def _per_channel(img: np.ndarray, fn) -> np.ndarray:
    if img.ndim == 2:
        return fn(img)
    return np.stack([fn(img[..., c]) for c in range(img.shape[2])], axis=-1)


def simulate_glare(l_in: np.ndarray, kernel: GsfKernel) -> np.ndarray:
    """Apply the glare kernel to a linear radiance map (per channel)."""
    l_in = np.asarray(l_in, dtype=float)
    _check_dims(l_in, kernel)

    def one(ch):
        out = convolve_canvas(ch, kernel)
        # only round-off ringing can be negative here
        return np.maximum(out, 0.0)

    return _per_channel(l_in, one)
