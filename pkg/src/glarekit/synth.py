"""Synthetic scenes and known degradations used as ground truth.

Scenes are built from rectangles and disks only, so every quantity a test
needs (clip masks, true fluxes, object boxes) is known analytically.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import SpecError
from .gsf import GsfParams, rasterize_kernel, simulate_glare
from .hdrmerge import ExposureFrame, ExposureStack
from .radiance import Rect

__all__ = [
    "Source",
    "SceneObject",
    "SceneSpec",
    "DegradationRecord",
    "gaussian_noise",
    "disk_mask",
    "make_scene",
    "degrade",
    "make_exposure_stack",
    "rig_scene",
    "tunnel_spec",
]


@dataclass(frozen=True)
class Source:
    cy: float
    cx: float
    radius: float
    intensity: float


@dataclass(frozen=True)
class SceneObject:
    rect: Rect
    label: str
    level: float = 0.0  # 0 leaves the background untouched


@dataclass
class SceneSpec:
    height: int
    width: int
    background: float = 0.0
    texture: float = 0.0  # relative amplitude of seeded background texture
    channels: int = 1
    dark_patches: list[Rect] = field(default_factory=list)
    sources: list[Source] = field(default_factory=list)
    objects: list[SceneObject] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown scene spec keys: {sorted(unknown)}")
        try:
            d["dark_patches"] = [Rect(**r) for r in d.get("dark_patches", [])]
            d["sources"] = [Source(**s) for s in d.get("sources", [])]
            d["objects"] = [
                SceneObject(Rect(**o["rect"]), o["label"], o.get("level", 0.0))
                for o in d.get("objects", [])
            ]
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise SpecError(f"malformed scene spec: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def gaussian_noise(shape, seed: int) -> np.ndarray:
    """Standard normal samples via Box-Muller on PCG64 uniforms.

    PCG64 output and the transform below are fully specified, so a given
    seed reproduces the same bits on every platform.
    """
    n = int(np.prod(shape))
    rng = np.random.Generator(np.random.PCG64(seed))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
    return z[:n].reshape(shape)


def disk_mask(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _rect_mask(height, width, r: Rect) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    m[r.slices()] = True
    return m


def make_scene(spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    if h <= 0 or w <= 0:
        raise SpecError("scene dimensions must be positive")
    if spec.channels not in (1, 3):
        raise SpecError("channels must be 1 or 3")
    if spec.background < 0 or spec.texture < 0:
        raise SpecError("background and texture must be non-negative")

    base = np.full((h, w), float(spec.background))
    if spec.texture > 0 and spec.background > 0:
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        base *= 1.0 + spec.texture * (rng.random((h, w)) - 0.5)
    for obj in spec.objects:
        obj.rect.check_inside(h, w)
        if obj.level > 0:
            base[obj.rect.slices()] = obj.level

    dark = np.zeros((h, w), dtype=bool)
    for r in spec.dark_patches:
        r.check_inside(h, w)
        dark |= _rect_mask(h, w, r)
    base[dark] = 0.0

    for s in spec.sources:
        if s.radius < 0 or s.intensity < 0:
            raise SpecError(f"invalid source {s}")
        if not (0 <= s.cy < h and 0 <= s.cx < w):
            raise SpecError(f"source centre outside the image: {s}")
        m = disk_mask(h, w, s.cy, s.cx, s.radius)
        if np.any(m & dark):
            raise SpecError(f"source {s} overlaps a dark patch")
        base[m] = s.intensity

    if spec.channels == 3:
        return np.repeat(base[..., None], 3, axis=2)
    return base


@dataclass(eq=False)
class DegradationRecord:
    params: GsfParams
    ceiling: float
    noise_sigma: float
    seed: int
    clip_mask: np.ndarray
    pristine: np.ndarray

    def replay(self) -> np.ndarray:
        """Recompute the degraded image from the pristine map."""
        out, _ = degrade(self.pristine, self.params, self.ceiling, self.noise_sigma, self.seed)
        return out

    def summary(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "ceiling": self.ceiling,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "clipped_pixels": int(self.clip_mask.sum()),
        }


def degrade(scene: np.ndarray, params: GsfParams, ceiling: float = np.inf,
            noise_sigma: float = 0.0, seed: int = 0):
    """Glare, seeded Gaussian noise (``sigma = noise_sigma * ceiling``) and
    clipping at ``ceiling``.  Returns ``(image, DegradationRecord)``."""
    if not ceiling > 0:
        raise SpecError("ceiling must be positive")
    scene = np.asarray(scene, dtype=float)
    kernel = rasterize_kernel(params, scene.shape[1], scene.shape[0])
    y = simulate_glare(scene, kernel)
    if noise_sigma > 0:
        if not np.isfinite(ceiling):
            raise SpecError("noise is specified relative to a finite ceiling")
        y = np.maximum(y + noise_sigma * ceiling * gaussian_noise(y.shape, seed), 0.0)
    clip = y >= ceiling
    y = np.minimum(y, ceiling)
    if y.ndim == 3:
        clip = clip.any(axis=2)
    rec = DegradationRecord(params, float(ceiling), float(noise_sigma), int(seed), clip, scene.copy())
    return y, rec


def make_exposure_stack(scene: np.ndarray, times: Sequence[float], ceiling: float,
                        noise_sigma: float = 0.0, seed: int = 0) -> ExposureStack:
    times = [float(t) for t in times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise SpecError(f"exposure times must strictly increase: {times}")
    scene = np.asarray(scene, dtype=float)
    if np.any(scene * times[0] >= ceiling):
        raise SpecError("the shortest exposure would saturate")
    frames = []
    for i, t in enumerate(times):
        v = scene * t
        if noise_sigma > 0:
            v = np.maximum(v + noise_sigma * ceiling * gaussian_noise(v.shape, seed + i), 0.0)
        frames.append(ExposureFrame(np.minimum(v, ceiling), t, ceiling))
    return ExposureStack(frames)


def rig_scene(height: int, width: int, phi_a: float, diameter_px: float = 2.0) -> np.ndarray:
    """Black frame with one centred disk of the given diameter: the point
    source calibration target."""
    spec = SceneSpec(height, width, sources=[Source(height // 2, width // 2, diameter_px / 2.0, phi_a)])
    return make_scene(spec)


def tunnel_spec(seed: int, size: int = 128, channels: int = 1,
                source_intensity: float = 200.0) -> SceneSpec:
    """Randomised tunnel-like layout: textured dim walls, black patches,
    a few labelled objects and one or two bright sources near the centre."""
    rng = np.random.Generator(np.random.PCG64(seed))
    h = w = size
    dark = []
    for _ in range(int(rng.integers(3, 6))):
        pw, ph = (int(v) for v in rng.integers(size // 12, size // 5, 2))
        x = int(rng.integers(0, w - pw))
        y = int(rng.choice([rng.integers(0, h // 4), rng.integers(3 * h // 4 - ph, h - ph)]))
        dark.append(Rect(x, y, pw, ph))
    objects = []
    for k in range(int(rng.integers(2, 4))):
        ow, oh = (int(v) for v in rng.integers(size // 10, size // 5, 2))
        x = int(rng.integers(0, w - ow))
        y = int(rng.integers(h // 4, 3 * h // 4 - oh))
        objects.append(SceneObject(Rect(x, y, ow, oh), ("car", "sign", "person")[k % 3],
                                   float(rng.uniform(0.2, 0.6))))
    sources = []
    for _ in range(int(rng.integers(1, 3))):
        sources.append(Source(float(rng.uniform(0.4, 0.6) * h), float(rng.uniform(0.3, 0.7) * w),
                              float(rng.uniform(1.5, 3.5)),
                              float(source_intensity * rng.uniform(0.5, 1.5))))
    spec = SceneSpec(h, w, background=float(rng.uniform(0.05, 0.15)), texture=0.5,
                     channels=channels, dark_patches=dark, sources=sources, objects=objects,
                     seed=seed)
    # drop dark patches that collide with a source
    spec.dark_patches = [
        r for r in dark
        if not any(np.any(disk_mask(h, w, s.cy, s.cx, s.radius) & _rect_mask(h, w, r)) for s in sources)
    ]
    return spec
