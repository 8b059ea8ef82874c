"""Point-source rig geometry and multi-exposure HDR merging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StackError
from .radiance import as_radiance, load_image

__all__ = [
    "SourceSpec",
    "ExposureFrame",
    "ExposureStack",
    "aperture_flux",
    "captured_light",
    "hat_weight",
    "merge_hdr",
    "load_stack_manifest",
]

# Frames at or above this fraction of the saturation level get zero weight.
CLIP_FRACTION = 0.98


@dataclass(frozen=True)
class SourceSpec:
    intensity_phi: float
    aperture_d: float  # millimetres

    def __post_init__(self):
        if not self.intensity_phi > 0 or not self.aperture_d > 0:
            raise ValueError("source intensity and aperture diameter must be positive")


def aperture_flux(spec: SourceSpec) -> float:
    """Light passing through the circular aperture: ``phi * pi * d**2 / 4``."""
    return spec.intensity_phi * math.pi * spec.aperture_d**2 / 4.0


def captured_light(phi_a, t):
    """Total light collected over exposure ``t``; works on arrays of times."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("exposure time must be non-negative")
    out = phi_a * t
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ExposureFrame:
    image: np.ndarray
    exposure_t: float
    saturation_level: float

    def __post_init__(self):
        if not self.exposure_t > 0:
            raise StackError(f"exposure time must be positive, got {self.exposure_t}")
        if not self.saturation_level > 0:
            raise StackError("saturation level must be positive")
        img = as_radiance(self.image)
        if np.any(img > self.saturation_level):
            raise StackError("frame values exceed the saturation level")
        object.__setattr__(self, "image", img)

    def saturated(self) -> np.ndarray:
        return self.image >= CLIP_FRACTION * self.saturation_level


class ExposureStack:
    """Aligned frames ordered by strictly increasing exposure time."""

    def __init__(self, frames: Sequence[ExposureFrame]):
        frames = list(frames)
        if not frames:
            raise ValueError("exposure stack is empty")
        shape = frames[0].image.shape
        for f in frames[1:]:
            if f.image.shape != shape:
                raise StackError(f"frame shapes differ: {shape} vs {f.image.shape}")
        times = [f.exposure_t for f in frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise StackError(f"exposure times must strictly increase: {times}")
        if np.any(frames[0].image >= frames[0].saturation_level):
            raise StackError("the shortest exposure contains saturated pixels")
        self.frames = frames

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def shape(self):
        return self.frames[0].image.shape


def hat_weight(v, saturation_level: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    w = np.maximum(0.0, 1.0 - np.abs(2.0 * v / saturation_level - 1.0))
    w[v >= CLIP_FRACTION * saturation_level] = 0.0
    return w


def merge_hdr(stack: ExposureStack) -> np.ndarray:
    """Merge a linear exposure stack into one radiance map.

    Each frame votes for ``v / t`` with a hat weight on ``v``; near-clipped
    samples get no vote.  Pixels without any vote (clipped everywhere, or
    exactly black) fall back to the shortest exposure.
    """
    if not isinstance(stack, ExposureStack):
        stack = ExposureStack(stack)
    num = np.zeros(stack.shape)
    den = np.zeros(stack.shape)
    for f in stack:
        w = hat_weight(f.image, f.saturation_level)
        num += w * (f.image / f.exposure_t)
        den += w
    first = stack.frames[0]
    fallback = first.image / first.exposure_t
    with np.errstate(invalid="ignore", divide="ignore"):
        merged = np.where(den > 0, num / den, fallback)
    return as_radiance(merged)


def load_stack_manifest(path) -> ExposureStack:
    """Read ``[{path, exposure_t, saturation_level}, ...]``; relative image
    paths resolve against the manifest's directory."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise StackError(f"{path}: manifest must be a JSON list")
    frames = []
    for e in entries:
        try:
            img_path = Path(e["path"])
            t = float(e["exposure_t"])
            sat = float(e["saturation_level"])
        except (KeyError, TypeError, ValueError):
            raise StackError(f"{path}: malformed manifest entry {e!r}") from None
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        frames.append(ExposureFrame(load_image(img_path), t, sat))
    frames.sort(key=lambda f: f.exposure_t)
    return ExposureStack(frames)
