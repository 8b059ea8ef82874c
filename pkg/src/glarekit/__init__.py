"""Glare calibration, simulation and removal for camera imaging pipelines."""

from .errors import GlareKitError
from .gsf import GsfKernel, GsfParams, rasterize_kernel, simulate_glare
from .deglare import DeglareOptions, deglare, wiener_deconvolve

__version__ = "0.1.0"

__all__ = [
    "GlareKitError",
    "GsfParams",
    "GsfKernel",
    "rasterize_kernel",
    "simulate_glare",
    "DeglareOptions",
    "deglare",
    "wiener_deconvolve",
]
