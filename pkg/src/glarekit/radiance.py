"""Linear radiance images: validation, file I/O, demosaicing, white balance.

Radiance maps are plain ``float64`` numpy arrays of shape ``(H, W)`` or
``(H, W, 3)`` holding non-negative, finite, linear values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import convolve

from .errors import DegeneratePatchError, DimensionError, FormatError

__all__ = [
    "Rect",
    "RawFrame",
    "load_raw",
    "as_radiance",
    "demosaic_bilinear",
    "white_balance",
    "load_image",
    "save_image",
    "load_pfm",
    "save_pfm",
    "load_png16",
    "save_png16",
]

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
_CHANNEL = {"R": 0, "G": 1, "B": 2}


def as_radiance(arr, clamp: bool = True) -> np.ndarray:
    """Coerce ``arr`` to a valid radiance map.

    Negative values are clamped to zero (``clamp=True``) or rejected.
    Non-finite values are always rejected.
    """
    a = np.array(arr, dtype=float)
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] not in (1, 3)):
        raise DimensionError(f"radiance map must be HxW or HxWx(1|3), got {a.shape}")
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.size == 0:
        raise DimensionError("radiance map is empty")
    if not np.all(np.isfinite(a)):
        raise FormatError("radiance map contains non-finite values")
    if np.any(a < 0):
        if not clamp:
            raise FormatError("radiance map contains negative values")
        a = np.maximum(a, 0.0)
    return a


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def check_inside(self, height: int, width: int) -> None:
        if self.w <= 0 or self.h <= 0:
            raise DimensionError(f"empty rectangle {self}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise DimensionError(f"{self} does not fit in a {height}x{width} image")

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


@dataclass(frozen=True)
class RawFrame:
    samples: np.ndarray
    cfa_pattern: str = "RGGB"
    bit_depth: int = 16

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise DimensionError("raw frame must be 2-D")
        if self.cfa_pattern not in CFA_PATTERNS:
            raise FormatError(f"unknown CFA pattern {self.cfa_pattern!r}")
        if not 8 <= self.bit_depth <= 16:
            raise FormatError(f"bit depth {self.bit_depth} outside 8..16")
        if s.shape[0] % 2 or s.shape[1] % 2:
            raise DimensionError(f"raw frame dimensions must be even, got {s.shape}")
        if np.any(s < 0) or np.any(s > 2**self.bit_depth - 1):
            raise FormatError("raw samples outside the sensor range")

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def channel_masks(self) -> np.ndarray:
        """Boolean ``(3, H, W)`` masks of where each colour was sampled."""
        masks = np.zeros((3, self.height, self.width), dtype=bool)
        for k, colour in enumerate(self.cfa_pattern):
            dy, dx = divmod(k, 2)
            masks[_CHANNEL[colour], dy::2, dx::2] = True
        return masks


# Bilinear weights.  Normalised convolution turns these into plain averages of
# whichever same-colour neighbours exist, which also handles the borders.
_K_RB = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])
_K_G = np.array([[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]])


def demosaic_bilinear(raw: RawFrame) -> np.ndarray:
    """Bilinear demosaic of a Bayer frame to an ``(H, W, 3)`` radiance map.

    Sampled positions are passed through unchanged; missing values are the
    mean of the adjacent samples of the same colour.
    """
    s = np.asarray(raw.samples, dtype=float)
    out = np.empty(s.shape + (3,))
    for c, mask in enumerate(raw.channel_masks()):
        k = _K_G if c == 1 else _K_RB
        m = mask.astype(float)
        num = convolve(s * m, k, mode="constant", cval=0.0)
        den = convolve(m, k, mode="constant", cval=0.0)
        out[..., c] = np.where(mask, s, num / den)
    return out


def white_balance(img: np.ndarray, white_patch: Rect) -> np.ndarray:
    """Scale R and B so the patch means match the green patch mean."""
    img = as_radiance(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError("white balance needs a 3-channel image")
    white_patch.check_inside(img.shape[0], img.shape[1])
    means = img[white_patch.slices()].reshape(-1, 3).mean(axis=0)
    if np.any(means <= 0):
        raise DegeneratePatchError(f"white patch has a zero channel mean: {means.tolist()}")
    gains = means[1] / means
    return img * gains


# --- file formats ----------------------------------------------------------


def load_raw(path, cfa_pattern: str = "RGGB", bit_depth: int = 16) -> RawFrame:
    """Read a single-channel 16-bit PNG of Bayer samples."""
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise FormatError(f"could not read {path}", path=str(path))
    if q.dtype != np.uint16 or q.ndim != 2:
        raise FormatError(f"{path}: raw frames must be single-channel 16-bit PNG", path=str(path))
    return RawFrame(q.astype(np.int64), cfa_pattern, bit_depth)


def save_pfm(img: np.ndarray, path) -> None:
    img = as_radiance(img)
    h, w = img.shape[:2]
    header = ("PF" if img.ndim == 3 else "Pf") + f"\n{w} {h}\n-1.0\n"
    data = np.flipud(img).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def _read_token(fh) -> bytes:
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            break
        if ch.isspace():
            if tok:
                break
            continue
        tok += ch
    return tok


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file", path=str(path))
        try:
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            scale = float(_read_token(fh))
        except ValueError:
            raise FormatError(f"{path}: malformed PFM header", path=str(path)) from None
        if w <= 0 or h <= 0 or scale == 0:
            raise FormatError(f"{path}: malformed PFM header", path=str(path))
        channels = 3 if magic == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        payload = fh.read()
    expected = w * h * channels * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: expected {expected} data bytes, found {len(payload)}", path=str(path)
        )
    data = np.frombuffer(payload, dtype=dtype).astype(float)
    data = data.reshape((h, w, channels) if channels == 3 else (h, w))
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite values", path=str(path))
    return as_radiance(np.flipud(data))


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_png16(img: np.ndarray, path, max_value: float | None = None) -> None:
    """Write a 16-bit PNG; values are scaled by ``max_value`` (image max by
    default) which is recorded in ``<path>.json``."""
    img = as_radiance(img)
    if max_value is None:
        max_value = float(img.max()) or 1.0
    if max_value <= 0:
        raise FormatError("max scale must be positive")
    q = np.rint(np.clip(img / max_value, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if q.ndim == 3:
        q = q[..., ::-1]  # OpenCV writes BGR
    if not cv2.imwrite(str(path), q):
        raise FormatError(f"could not write {path}", path=str(path))
    _sidecar(path).write_text(json.dumps({"max": float(max_value)}) + "\n")


def load_png16(path) -> np.ndarray:
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise FormatError(f"could not read {path}", path=str(path))
    if q.dtype != np.uint16:
        raise FormatError(f"{path}: expected a 16-bit PNG, got {q.dtype}", path=str(path))
    if q.ndim == 3:
        if q.shape[2] == 4:
            q = q[..., :3]
        q = q[..., ::-1]
    side = _sidecar(path)
    max_value = 1.0
    if side.exists():
        try:
            max_value = float(json.loads(side.read_text())["max"])
        except (ValueError, KeyError, TypeError):
            raise FormatError(f"{side}: malformed sidecar", path=str(side)) from None
    return as_radiance(q.astype(float) / 65535.0 * max_value)


def load_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return load_pfm(path)
    if suffix == ".png":
        return load_png16(path)
    raise FormatError(f"unsupported image format {suffix!r}", path=str(path))


def save_image(img: np.ndarray, path, max_value: float | None = None) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        save_pfm(img, path)
    elif suffix == ".png":
        save_png16(img, path, max_value)
    else:
        raise FormatError(f"unsupported image format {suffix!r}", path=str(path))
