"""Transfer functions, quantization and their inverses.

Gamma and linear curves act on values normalised by a caller-supplied
ceiling.  The log curve acts on raw digital values of an ``N``-bit signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "Gamma",
    "Log",
    "Linear",
    "TransferFunction",
    "EncodedImage",
    "parse_tf",
    "tf_to_dict",
    "tf_from_dict",
    "encode",
    "decode",
    "quantize",
    "unsharp_mask",
]


@dataclass(frozen=True)
class Gamma:
    gamma: float = 2.2  # output = input ** (1 / gamma)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class Log:
    n_bits: int = 16

    def __post_init__(self):
        if not 8 <= self.n_bits <= 16:
            raise ValueError(f"n_bits must be in [8, 16], got {self.n_bits}")

    @property
    def full_scale(self) -> float:
        return float(2**self.n_bits - 1)


@dataclass(frozen=True)
class Linear:
    m: float = 1.0
    c: float = 0.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"gain must be positive, got {self.m}")


TransferFunction = Union[Gamma, Log, Linear]
_TAGS = {"gamma": Gamma, "log": Log, "linear": Linear}


def tf_to_dict(tf: TransferFunction) -> dict:
    if isinstance(tf, Gamma):
        return {"tf": "gamma", "gamma": tf.gamma}
    if isinstance(tf, Log):
        return {"tf": "log", "n_bits": tf.n_bits}
    if isinstance(tf, Linear):
        return {"tf": "linear", "m": tf.m, "c": tf.c}
    raise TypeError(f"not a transfer function: {tf!r}")


def tf_from_dict(d: dict) -> TransferFunction:
    d = dict(d)
    tag = d.pop("tf", None)
    if tag not in _TAGS:
        raise ValueError(f"unknown transfer function tag {tag!r}")
    try:
        return _TAGS[tag](**d)
    except TypeError as exc:
        raise ValueError(f"bad {tag} fields: {exc}") from None


def parse_tf(text: str) -> TransferFunction:
    """Parse ``gamma:2.2``, ``log:16`` or ``linear:m,c``."""
    tag, _, args = text.partition(":")
    tag = tag.strip().lower()
    try:
        if tag == "gamma":
            return Gamma(float(args)) if args else Gamma()
        if tag == "log":
            return Log(int(args)) if args else Log()
        if tag == "linear":
            if not args:
                return Linear()
            m, c = (float(v) for v in args.split(","))
            return Linear(m, c)
    except ValueError as exc:
        raise ValueError(f"bad transfer function {text!r}: {exc}") from None
    raise ValueError(f"unknown transfer function {text!r}")


@dataclass(frozen=True, eq=False)
class EncodedImage:
    values: np.ndarray
    tf: TransferFunction
    quant_bits: int | None = None
    ceiling: float = 1.0  # normalisation used by gamma and linear curves

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size and (v.min() < 0 or v.max() > 1 or not np.all(np.isfinite(v))):
            raise ValueError("encoded values must lie in [0, 1]")


def _linear_values(img) -> np.ndarray:
    y = np.array(img, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("input contains non-finite values")
    if np.any(y < 0):
        raise ValueError("transfer functions need non-negative input")
    return y


def encode(img, tf: TransferFunction, ceiling: float | None = None) -> EncodedImage:
    """Apply ``tf`` per pixel.

    ``ceiling`` normalises gamma and linear inputs (default: image max, or 1
    for a black image) and is ignored by the log curve.  Inputs beyond the
    curve's domain are clipped so the output stays in [0, 1].  Any array
    shape is accepted; negative or non-finite input is rejected.
    """
    y = _linear_values(img)
    if isinstance(tf, Log):
        full = tf.full_scale
        with np.errstate(divide="ignore"):
            e = np.where(y >= 1.0, np.log2(np.maximum(y, 1.0)) / math.log2(full), 0.0)
        return EncodedImage(np.clip(e, 0.0, 1.0), tf, None, 1.0)

    if ceiling is None:
        ceiling = float(y.max()) or 1.0
    if not ceiling > 0:
        raise ValueError("ceiling must be positive")
    v = np.clip(y / ceiling, 0.0, 1.0)
    if isinstance(tf, Gamma):
        out = v ** (1.0 / tf.gamma)
    elif isinstance(tf, Linear):
        out = np.clip(tf.m * v + tf.c, 0.0, 1.0)
    else:
        raise TypeError(f"not a transfer function: {tf!r}")
    return EncodedImage(out, tf, None, float(ceiling))


def decode(enc: EncodedImage) -> np.ndarray:
    """Invert the curve; the result is in the units ``encode`` was given."""
    v = np.asarray(enc.values, dtype=float)
    tf = enc.tf
    if isinstance(tf, Log):
        return np.where(v > 0, np.exp2(v * math.log2(tf.full_scale)), 0.0)
    if isinstance(tf, Gamma):
        out = v**tf.gamma
    elif isinstance(tf, Linear):
        out = np.maximum((v - tf.c) / tf.m, 0.0)
    else:
        raise TypeError(f"not a transfer function: {tf!r}")
    return out * enc.ceiling


def quantize(enc: EncodedImage, bits: int) -> EncodedImage:
    """Round to the nearest multiple of ``1 / (2**bits - 1)``."""
    if not 1 <= int(bits) <= 16:
        raise ValueError(f"bits must be in [1, 16], got {bits}")
    levels = float(2 ** int(bits) - 1)
    q = np.rint(np.asarray(enc.values) * levels) / levels
    return EncodedImage(q, enc.tf, int(bits), enc.ceiling)


def unsharp_mask(values, sigma: float = 2.0, amount: float = 0.5) -> np.ndarray:
    """Encoded-domain sharpening baseline: ``v + amount * (v - blur(v))``,
    clipped to [0, 1]."""
    v = np.asarray(values, dtype=float)
    if sigma <= 0 or amount < 0:
        raise ValueError("sigma must be positive and amount non-negative")
    sig = (sigma, sigma, 0) if v.ndim == 3 else sigma
    blurred = gaussian_filter(v, sig, mode="nearest")
    return np.clip(v + amount * (v - blurred), 0.0, 1.0)
