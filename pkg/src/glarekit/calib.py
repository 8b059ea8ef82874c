"""Joint glare-model calibration across cameras.

Each camera contributes a point-source capture: a known input radiance
``l_in`` (black except for a small disk) and the merged HDR image
``l_capt``.  The fit minimises the weighted log-domain misfit between the
simulated and captured images plus an L2 penalty on the parameters.

The simulation here uses the kernel's absolute transfer, i.e. the
rasterised model before normalisation.  The normalised kernel used for
deglaring only constrains the ratio ``p1 : p2``; the absolute transfer
also fixes their scale, which a calibration needs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import ObjectiveError, ValidationError
from .gsf import GsfParams, rasterize_kernel, simulate_glare
from .radiance import as_radiance, load_image

__all__ = [
    "CalibScene",
    "CalibDataset",
    "FitReport",
    "BOUNDS",
    "forward_capture",
    "scene_residual",
    "joint_objective",
    "fit_joint_gsf",
    "validate_and_tune",
    "load_calib_manifest",
]

log = logging.getLogger(__name__)

# (low, high) per parameter; p3 is searched in log space
BOUNDS = ((1e-4, 1.0), (0.0, 1.0), (1e-4, 1e3), (0.1, 4.0))
DEFAULT_INIT = GsfParams(0.5, 0.01, 1.0, 1.0)
DEFAULT_LAMBDA_GRID = (0.0, 1e-4, 1e-2, 1.0)


@dataclass(frozen=True, eq=False)
class CalibScene:
    camera_id: str
    l_in: np.ndarray
    l_capt: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        l_in = as_radiance(self.l_in)
        l_capt = as_radiance(self.l_capt)
        if l_in.shape != l_capt.shape:
            raise ValidationError(
                f"scene {self.camera_id!r}: l_in {l_in.shape} and l_capt {l_capt.shape} differ",
                camera_id=self.camera_id,
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"scene {self.camera_id!r}: alpha {self.alpha} outside [0, 1]")
        if not l_in.max() > 0:
            raise ValidationError(f"scene {self.camera_id!r}: l_in has no light source")
        object.__setattr__(self, "l_in", l_in)
        object.__setattr__(self, "l_capt", l_capt)

    @property
    def eps(self) -> float:
        return 1e-6 * float(max(self.l_in.max(), self.l_capt.max()))


@dataclass(frozen=True, eq=False)
class CalibDataset:
    scenes: tuple
    lam: float = 0.0

    def __post_init__(self):
        scenes = tuple(self.scenes)
        if not scenes:
            raise ValidationError("calibration dataset has no scenes")
        if not any(s.alpha > 0 for s in scenes):
            raise ValidationError("every scene has alpha = 0")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        object.__setattr__(self, "scenes", scenes)

    def with_lambda(self, lam: float) -> "CalibDataset":
        return replace(self, lam=float(lam))

    def with_alphas(self, alphas: Sequence[float]) -> "CalibDataset":
        scenes = [replace(s, alpha=float(a)) for s, a in zip(self.scenes, alphas)]
        return replace(self, scenes=tuple(scenes))


@dataclass
class FitReport:
    params: GsfParams
    final_objective: float
    per_scene_residual: dict = field(default_factory=dict)
    iterations: int = 0
    converged: bool = False
    restarts: int = 0

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "final_objective": self.final_objective,
            "per_scene_residual": dict(self.per_scene_residual),
            "iterations": self.iterations,
            "converged": self.converged,
            "restarts": self.restarts,
        }


def forward_capture(l_in, params: GsfParams) -> np.ndarray:
    """Simulated capture of ``l_in`` with the un-normalised kernel."""
    l_in = as_radiance(l_in)
    k = rasterize_kernel(params, l_in.shape[1], l_in.shape[0])
    return simulate_glare(l_in, k) * k.mass


def _log_misfit(sim, scene: CalibScene) -> np.ndarray:
    eps = scene.eps
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.log(sim + eps) - np.log(scene.l_capt + eps)
    if not np.all(np.isfinite(d)):
        raise ObjectiveError(f"non-finite residual in scene {scene.camera_id!r}",
                             camera_id=scene.camera_id)
    return d


def scene_residual(params: GsfParams, scene: CalibScene) -> float:
    """Log-domain RMSE between simulation and capture for one scene."""
    d = _log_misfit(forward_capture(scene.l_in, params), scene)
    return float(np.sqrt(np.mean(d * d)))


def joint_objective(params: GsfParams, ds: CalibDataset) -> float:
    total = 0.0
    for s in ds.scenes:
        if s.alpha == 0:
            continue
        d = _log_misfit(forward_capture(s.l_in, params), s)
        total += s.alpha * float(np.sum(d * d))
    return total + ds.lam * float(np.sum(params.as_array() ** 2))


# --- fitting -----------------------------------------------------------------


def _to_search(p: GsfParams) -> np.ndarray:
    return np.array([p.p1, p.p2, math.log(p.p3), p.p4])


def _from_search(v) -> GsfParams:
    lo = np.array([BOUNDS[0][0], BOUNDS[1][0], math.log(BOUNDS[2][0]), BOUNDS[3][0]])
    hi = np.array([BOUNDS[0][1], BOUNDS[1][1], math.log(BOUNDS[2][1]), BOUNDS[3][1]])
    v = np.clip(np.asarray(v, dtype=float), lo, hi)
    return GsfParams(float(v[0]), float(v[1]), math.exp(v[2]), float(v[3]))


def _search_bounds():
    return [BOUNDS[0], BOUNDS[1], (math.log(BOUNDS[2][0]), math.log(BOUNDS[2][1])), BOUNDS[3]]


def _check_init(p: GsfParams) -> None:
    for name, val, (lo, hi) in zip(("p1", "p2", "p3", "p4"), p.as_array(), BOUNDS):
        if not lo <= val <= hi:
            raise ValidationError(f"initial {name}={val} outside [{lo}, {hi}]")


def _simplex(x0: np.ndarray) -> np.ndarray:
    # relative steps, with absolute fallbacks for near-zero coordinates
    steps = np.where(np.abs(x0) > 1e-3, 0.2 * np.abs(x0), np.array([0.05, 1e-3, 0.5, 0.2]))
    sim = np.tile(x0, (5, 1))
    for i in range(4):
        sim[i + 1, i] += steps[i]
    return sim


def _run_nm(ds: CalibDataset, x0: np.ndarray, max_iter: int):
    def fun(v):
        return joint_objective(_from_search(v), ds)

    f0 = fun(x0)
    res = minimize(
        fun, x0, method="Nelder-Mead", bounds=_search_bounds(),
        options={"maxiter": max_iter, "maxfev": 4 * max_iter, "initial_simplex": _simplex(x0),
                 "xatol": 1e-6, "fatol": 1e-8 * max(f0, 1e-300)},
    )
    return res


def fit_joint_gsf(ds: CalibDataset, init: GsfParams | None = None, max_iter: int = 2000,
                  seed: int = 0) -> FitReport:
    """Nelder-Mead fit of the joint objective.

    If the first run hits the iteration cap it is restarted once from the
    best point with a freshly built simplex (``seed`` jitters it).  The best
    point seen is returned and never scores worse than ``init``.
    """
    init = init or DEFAULT_INIT
    _check_init(init)
    x0 = _to_search(init)
    f_init = joint_objective(init, ds)
    res = _run_nm(ds, x0, max_iter)
    iters = int(res.nit)
    restarts = 0
    if not res.success:
        rng = np.random.Generator(np.random.PCG64(seed))
        x1 = res.x * (1.0 + 0.05 * rng.standard_normal(4))
        res2 = _run_nm(ds, x1, max_iter)
        iters += int(res2.nit)
        restarts = 1
        if res2.fun <= res.fun:
            res = res2
    params = _from_search(res.x)
    f = joint_objective(params, ds)
    if f > f_init:
        params, f = init, f_init
    residuals = {s.camera_id: scene_residual(params, s) for s in ds.scenes}
    log.info("calibration fit: objective %.6g after %d iterations", f, iters)
    return FitReport(params, f, residuals, iters, bool(res.success), restarts)


def validate_and_tune(train: CalibDataset, holdout: Sequence[CalibScene],
                      lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                      alpha_policy: str = "uniform", init: GsfParams | None = None,
                      max_iter: int = 2000):
    """Pick the regulariser weight (and scene weights) by holdout error.

    Returns ``(params, lambda, alphas, report)`` where ``report`` is the
    :class:`FitReport` of the chosen fit.
    """
    holdout = list(holdout)
    if not holdout:
        raise ValidationError("holdout set is empty")
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ValidationError("lambda grid is empty")
    if alpha_policy not in ("uniform", "inverse-residual"):
        raise ValidationError(f"unknown alpha policy {alpha_policy!r}")

    alphas = [1.0] * len(train.scenes)
    base = train.with_alphas(alphas)
    if alpha_policy == "inverse-residual":
        pilot = fit_joint_gsf(base.with_lambda(grid[0]), init, max_iter)
        res = np.array([pilot.per_scene_residual[s.camera_id] for s in base.scenes])
        inv = 1.0 / np.maximum(res, 1e-12)
        alphas = (inv / inv.max()).tolist()
        base = base.with_alphas(alphas)

    best = None
    for lam in grid:
        rep = fit_joint_gsf(base.with_lambda(lam), init, max_iter)
        err = float(np.mean([scene_residual(rep.params, s) for s in holdout]))
        log.info("lambda %.3g: holdout log-RMSE %.6g", lam, err)
        if best is None or err < best[0]:
            best = (err, lam, rep)
    _, lam, rep = best
    return rep.params, lam, alphas, rep


def load_calib_manifest(path) -> CalibDataset:
    """``{"scenes": [{camera_id, l_in_path, l_capt_path, alpha}], "lambda": x}``;
    relative paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        entries = doc["scenes"]
        lam = float(doc.get("lambda", 0.0))
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed calibration manifest ({exc})") from None
    scenes = []
    for e in entries:
        try:
            paths = [Path(e["l_in_path"]), Path(e["l_capt_path"])]
            paths = [p if p.is_absolute() else path.parent / p for p in paths]
            scenes.append(CalibScene(str(e["camera_id"]), load_image(paths[0]), load_image(paths[1]),
                                     float(e.get("alpha", 1.0))))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: malformed scene entry {e!r}") from None
    return CalibDataset(scenes, lam)
