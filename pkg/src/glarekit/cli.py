"""Command line entry point: ``glarekit <subcommand> ...``.

Exit codes are 0 on success, 2 on usage errors and 1 on processing errors.
Processing errors are written to stderr as one JSON object with a
module-qualified ``code``.  Logs go to stderr as JSON lines; stdout only
carries requested payloads such as scores.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import calib, encode as enc, metrics
from .deglare import DeglareOptions, deglare
from .errors import ConfigError, GlareKitError
from .gsf import GsfParams, load_params, rasterize_kernel, save_params, simulate_glare
from .hdrmerge import load_stack_manifest, merge_hdr
from .radiance import Rect, demosaic_bilinear, load_image, load_raw, save_image, white_balance
from .synth import SceneSpec, degrade, make_scene, tunnel_spec

log = logging.getLogger("glarekit")

DEFAULT_PARAMS = GsfParams(0.9, 0.004, 0.3, 0.9)
CONFIG_VERSION = 1


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


# --- logging -----------------------------------------------------------------


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({
            "ts": round(record.created, 6),
            "level": record.levelname.lower(),
            "module": record.name,
            "msg": record.getMessage(),
        })


def _setup_logging(level: str) -> None:
    root = logging.getLogger("glarekit")
    root.handlers.clear()
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_JsonFormatter())
    root.addHandler(h)
    root.setLevel(level.upper())
    root.propagate = False


# --- helpers -----------------------------------------------------------------


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _params_arg(value) -> GsfParams:
    if isinstance(value, dict):
        return GsfParams.from_dict(value)
    return load_params(value)


def _deglare_options(ns) -> DeglareOptions:
    return DeglareOptions(
        threshold_frac=ns.sat_threshold,
        ceiling=ns.ceiling,
        dark_sigma=ns.dark_sigma,
        dark_patch=ns.dark_patch,
        dark_quantile=ns.dark_quantile,
        lambda1=ns.lambda1,
        nsr=ns.nsr,
        max_iter=ns.max_iter,
    )


def _deglare_file(src: Path, dst: Path, params: GsfParams, opts, report_path=None) -> dict:
    img = load_image(src)
    kernel = rasterize_kernel(params, img.shape[1], img.shape[0])
    out, report = deglare(img, kernel, opts)
    save_image(out, dst)
    rep = {"input": src.name, "output": dst.name, **report.to_dict()}
    if report_path is not None:
        _write_json(report_path, rep)
    log.info("deglared %s: |S|=%d, success=%s", src.name, report.saturated, report.success)
    return rep


def _encode_file(src: Path, dst: Path, tf, bits, ceiling, unsharp=None) -> None:
    img = load_image(src)
    e = enc.encode(img, tf, ceiling)
    if bits:
        e = enc.quantize(e, bits)
    vals = e.values
    if unsharp is not None:
        vals = enc.unsharp_mask(vals, **unsharp)
        if bits:
            vals = enc.quantize(enc.EncodedImage(vals, tf, None, e.ceiling), bits).values
    save_image(vals, dst, max_value=1.0)


def _score(metric: str, pred, ref, iou_thresh: float, mask=None) -> dict:
    if metric == "miou":
        p = {d.image_id: d for d in metrics.load_detections(pred)}
        r = {d.image_id: d for d in metrics.load_detections(ref)}
        ids = sorted(set(p) | set(r))
        vals = [metrics.miou(p.get(i, ()), r.get(i, ())) for i in ids]
        value = float(np.mean(vals)) if vals else 1.0
        support = len(ids)
    elif metric == "map":
        pc: dict = {}
        rc: dict = {}
        for d in metrics.load_detections(pred):
            for c, boxes in d.by_class().items():
                pc.setdefault(c, []).extend(boxes)
        for d in metrics.load_detections(ref):
            for c, boxes in d.by_class().items():
                rc.setdefault(c, []).extend(boxes)
        value = metrics.mean_ap(pc, rc, iou_thresh)
        support = len(rc)
    elif metric in ("mota", "motp"):
        s = metrics.mota_motp(metrics.load_tracks(pred), metrics.load_tracks(ref), iou_thresh, full=True)
        value = s.mota if metric == "mota" else s.motp
        support = s.gt
    elif metric == "rmse-lane":
        p = metrics.load_lanes(pred)
        r = metrics.load_lanes(ref)
        if len(p) != len(r):
            raise ValueError("prediction and reference hold different numbers of lanes")
        vals = [metrics.rmse_points(a, b) for a, b in zip(p, r)]
        value = float(np.mean(vals))
        support = len(vals)
    elif metric == "rmse-depth":
        m = None if mask is None else load_image(mask) > 0.5
        value = metrics.rmse_depth(load_image(pred), load_image(ref), m)
        support = int(m.sum()) if m is not None else int(load_image(ref).size)
    else:
        raise UsageError(f"unknown metric {metric!r}")
    return {"metric": metric, "value": float(value), "support": int(support)}


# --- subcommands -------------------------------------------------------------


def cmd_calibrate(ns) -> int:
    ds = calib.load_calib_manifest(ns.manifest)
    init = _params_arg(ns.init) if ns.init else None
    if ns.holdout:
        holdout = calib.load_calib_manifest(ns.holdout).scenes
        grid = [float(v) for v in ns.lambda_grid.split(",")]
        params, lam, alphas, rep = calib.validate_and_tune(ds, holdout, grid, ns.alpha_policy, init, ns.max_iter)
        extra = {"lambda": lam, "alphas": alphas}
    else:
        rep = calib.fit_joint_gsf(ds, init, ns.max_iter, ns.seed)
        params, extra = rep.params, {"lambda": ds.lam}
    save_params(params, ns.out)
    if ns.report:
        _write_json(ns.report, {**rep.to_dict(), **extra})
    return 0


def cmd_simulate(ns) -> int:
    img = load_image(ns.input)
    params = load_params(ns.gsf)
    if ns.ceiling is None and ns.noise == 0:
        out = simulate_glare(img, rasterize_kernel(params, img.shape[1], img.shape[0]))
    else:
        out, _ = degrade(img, params, ns.ceiling if ns.ceiling is not None else np.inf, ns.noise, ns.seed)
    save_image(out, ns.out)
    return 0


def cmd_deglare(ns) -> int:
    params = load_params(ns.gsf)
    opts = _deglare_options(ns)
    src = Path(ns.input)
    if not src.is_dir():
        _deglare_file(src, Path(ns.out), params, opts, ns.report)
        return 0
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".pfm", ".png"))
    dst_dir = Path(ns.out)
    dst_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=ns.jobs) as pool:
        reps = list(pool.map(lambda p: _deglare_file(p, dst_dir / p.name, params, opts), files))
    if ns.report:
        _write_json(ns.report, reps)
    return 0


def cmd_encode(ns) -> int:
    tf = enc.parse_tf(ns.tf)
    _encode_file(Path(ns.input), Path(ns.out), tf, ns.quant_bits, ns.ceiling)
    return 0


def cmd_score(ns) -> int:
    rec = _score(ns.metric, ns.pred, ns.ref, ns.iou_thresh, ns.mask)
    metrics.write_report([rec], ns.report, ns.csv)
    print(f"{rec['value']:.10g}")
    return 0


def _synth_outputs(spec: SceneSpec, params: GsfParams, ceiling, noise, seed, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    scene = make_scene(spec)
    degraded, rec = degrade(scene, params, ceiling, noise, seed)
    save_image(scene, out / "scene.pfm")
    save_image(degraded, out / "degraded.pfm")
    save_params(params, out / "params.json")
    _write_json(out / "spec.json", spec.to_dict())
    _write_json(out / "record.json", rec.summary())
    np.save(out / "clip_mask.npy", rec.clip_mask)
    gt = {"image_id": "scene", "boxes": [
        {"x1": o.rect.x, "y1": o.rect.y, "x2": o.rect.x + o.rect.w, "y2": o.rect.y + o.rect.h,
         "class": o.label, "score": 1.0} for o in spec.objects]}
    (out / "gt_detections.jsonl").write_text(json.dumps(gt, sort_keys=True) + "\n")


def cmd_synth(ns) -> int:
    if ns.spec:
        spec = SceneSpec.from_json(ns.spec)
    else:
        spec = tunnel_spec(ns.seed, ns.size, ns.channels)
    params = load_params(ns.gsf) if ns.gsf else DEFAULT_PARAMS
    _synth_outputs(spec, params, ns.ceiling, ns.noise, ns.seed, Path(ns.out))
    return 0


# --- pipeline ----------------------------------------------------------------

_CONFIG_KEYS = {"version", "input", "output_dir", "demosaic", "white_balance",
                "glare_a", "encode", "glare_b", "score"}
_INPUT_KEYS = {"image", "stack", "raw", "synth"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_pipeline_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    _check_keys(cfg, _CONFIG_KEYS, "config")
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.get('version')!r}")
    if "input" not in cfg or "output_dir" not in cfg:
        raise ConfigError("config needs 'input' and 'output_dir'")
    inp = cfg["input"]
    _check_keys(inp, _INPUT_KEYS, "input")
    if len(inp) != 1:
        raise ConfigError("input must name exactly one of " + ", ".join(sorted(_INPUT_KEYS)))
    if cfg.get("demosaic") and "raw" not in inp:
        raise ConfigError("demosaic needs a raw input")
    ga = cfg.get("glare_a")
    if ga:
        _check_keys(ga, {"method", "gsf", "nsr", "sat_threshold", "ceiling", "dark_sigma",
                         "dark_patch", "dark_quantile", "lambda1", "max_iter"}, "glare_a")
        if ga.get("method", "deglare") != "deglare":
            raise ConfigError("glare_a only hosts the 'deglare' method")
    gb = cfg.get("glare_b")
    if gb:
        _check_keys(gb, {"method", "sigma", "amount"}, "glare_b")
        if gb.get("method", "unsharp") != "unsharp":
            raise ConfigError("glare_b only hosts the 'unsharp' baseline")
    if cfg.get("encode"):
        _check_keys(cfg["encode"], {"tf", "quant_bits", "ceiling"}, "encode")
    if cfg.get("score"):
        _check_keys(cfg["score"], {"metric", "pred", "ref", "iou_thresh", "mask"}, "score")
    base = path.parent

    def resolve(p):
        return p if p is None or Path(p).is_absolute() else str(base / p)

    cfg["output_dir"] = resolve(cfg["output_dir"])
    for k in ("image", "stack"):
        if k in inp:
            inp[k] = resolve(inp[k])
    if "raw" in inp:
        raw = inp["raw"] if isinstance(inp["raw"], dict) else {"path": inp["raw"]}
        _check_keys(raw, {"path", "cfa", "bit_depth"}, "input.raw")
        raw["path"] = resolve(raw["path"])
        inp["raw"] = raw
    if "synth" in inp:
        syn = inp["synth"]
        _check_keys(syn, {"spec", "tunnel_seed", "size", "channels", "gsf", "ceiling", "noise", "seed"},
                    "input.synth")
        if isinstance(syn.get("spec"), str):
            syn["spec"] = resolve(syn["spec"])
        if isinstance(syn.get("gsf"), str):
            syn["gsf"] = resolve(syn["gsf"])
    if ga and isinstance(ga.get("gsf"), str):
        ga["gsf"] = resolve(ga["gsf"])
    if cfg.get("score"):
        for k in ("pred", "ref", "mask"):
            if cfg["score"].get(k):
                cfg["score"][k] = resolve(cfg["score"][k])
    return cfg


def run_pipeline(cfg: dict, seed: int = 0) -> dict:
    """Run the stages in their fixed order.  Every stage reads the previous
    stage's file and writes its own, so the result equals chaining the
    individual subcommands."""
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    inp = cfg["input"]
    summary: dict = {"stages": []}
    gsf_default = None

    if "synth" in inp:
        syn = inp["synth"]
        if syn.get("spec") is None:
            spec = tunnel_spec(syn.get("tunnel_seed", seed), syn.get("size", 128), syn.get("channels", 1))
        elif isinstance(syn["spec"], dict):
            spec = SceneSpec.from_dict(syn["spec"])
        else:
            spec = SceneSpec.from_json(syn["spec"])
        params = _params_arg(syn["gsf"]) if syn.get("gsf") else DEFAULT_PARAMS
        _synth_outputs(spec, params, syn.get("ceiling", 1.0), syn.get("noise", 0.0),
                       syn.get("seed", seed), out / "synth")
        current = out / "synth" / "degraded.pfm"
        gsf_default = out / "synth" / "params.json"
        summary["stages"].append("synth")
    elif "stack" in inp:
        current = out / "merged.pfm"
        save_image(merge_hdr(load_stack_manifest(inp["stack"])), current)
        summary["stages"].append("merge")
    elif "raw" in inp:
        raw = load_raw(inp["raw"]["path"], inp["raw"].get("cfa", "RGGB"), inp["raw"].get("bit_depth", 16))
        current = out / "demosaiced.pfm"
        save_image(demosaic_bilinear(raw), current)
        summary["stages"].append("demosaic")
    else:
        current = Path(inp["image"])

    wb = cfg.get("white_balance")
    if wb:
        nxt = out / "balanced.pfm"
        save_image(white_balance(load_image(current), Rect(**wb)), nxt)
        current = nxt
        summary["stages"].append("white_balance")

    ga = cfg.get("glare_a")
    if ga:
        gsf = ga.get("gsf", gsf_default)
        if gsf is None:
            raise ConfigError("glare_a needs 'gsf' unless the input is synthetic")
        ns = argparse.Namespace(
            sat_threshold=ga.get("sat_threshold", 0.98), ceiling=ga.get("ceiling"),
            dark_sigma=ga.get("dark_sigma", 2.0), dark_patch=ga.get("dark_patch", 7),
            dark_quantile=ga.get("dark_quantile", 0.05), lambda1=ga.get("lambda1"),
            nsr=ga.get("nsr", 1e-4), max_iter=ga.get("max_iter", 2000))
        nxt = out / "restored.pfm"
        _deglare_file(current, nxt, _params_arg(gsf), _deglare_options(ns), out / "deglare_report.json")
        current = nxt
        summary["stages"].append("glare_a")

    ec = cfg.get("encode")
    gb = cfg.get("glare_b")
    if ec or gb:
        ec = ec or {}
        tf = enc.parse_tf(ec.get("tf", "gamma:2.2"))
        nxt = out / "encoded.png"
        unsharp = None
        if gb:
            unsharp = {"sigma": gb.get("sigma", 2.0), "amount": gb.get("amount", 0.5)}
        _encode_file(current, nxt, tf, ec.get("quant_bits"), ec.get("ceiling"), unsharp)
        current = nxt
        summary["stages"].append("encode")
        if gb:
            summary["stages"].append("glare_b")

    sc = cfg.get("score")
    if sc:
        rec = _score(sc["metric"], sc["pred"], sc["ref"], sc.get("iou_thresh", 0.5), sc.get("mask"))
        metrics.write_report([rec], out / "score.json", out / "score.csv")
        summary["score"] = rec
        summary["stages"].append("score")

    summary["output"] = current.name
    _write_json(out / "pipeline.json", summary)
    return summary


def cmd_pipeline(ns) -> int:
    cfg = load_pipeline_config(ns.config)
    run_pipeline(cfg, ns.seed)
    return 0


# --- argument parsing ----------------------------------------------------------


def _add_deglare_flags(p):
    p.add_argument("--nsr", type=float, default=1e-4, help="Wiener noise-to-signal ratio (default: %(default)s)")
    p.add_argument("--sat-threshold", type=float, default=0.98,
                   help="saturation threshold as a fraction of the ceiling (default: %(default)s)")
    p.add_argument("--ceiling", type=float, default=None, help="sensor ceiling (default: image max)")
    p.add_argument("--dark-sigma", type=float, default=2.0, help="blur before the dark search (default: %(default)s)")
    p.add_argument("--dark-patch", type=int, default=7, help="dark-channel patch size (default: %(default)s)")
    p.add_argument("--dark-quantile", type=float, default=0.05,
                   help="fraction of unsaturated pixels used as dark pixels (default: %(default)s)")
    p.add_argument("--lambda1", type=float, default=None,
                   help="l1 weight on the stray-light slack (default: 1e-3 x mean dark value)")
    p.add_argument("--max-iter", type=int, default=2000, help="solver iteration cap (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glarekit", description=__doc__.splitlines()[0])
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                    help="worker threads for batch work (default: logical cores)")
    ap.add_argument("--seed", type=int, default=0, help="seed for synthetic data and noise (default: %(default)s)")
    ap.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"],
                    help="stderr log level (default: %(default)s)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit the glare model to point-source captures")
    p.add_argument("--manifest", required=True, help="calibration manifest JSON")
    p.add_argument("--holdout", help="holdout manifest; enables the lambda/alpha search")
    p.add_argument("--init", help="initial GsfParams JSON")
    p.add_argument("--lambda-grid", default="0,1e-4,1e-2,1", help="comma-separated grid (default: %(default)s)")
    p.add_argument("--alpha-policy", default="uniform", choices=["uniform", "inverse-residual"],
                   help="scene weighting (default: %(default)s)")
    p.add_argument("--max-iter", type=int, default=2000, help="optimizer iteration cap (default: %(default)s)")
    p.add_argument("--out", required=True, help="fitted GsfParams JSON")
    p.add_argument("--report", help="FitReport JSON")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="apply glare (and optionally noise and clipping) to an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--gsf", required=True, help="GsfParams JSON")
    p.add_argument("--ceiling", type=float, default=None, help="clip level (default: no clipping)")
    p.add_argument("--noise", type=float, default=0.0, help="noise sigma relative to the ceiling (default: %(default)s)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("deglare", help="remove glare from an image or a directory of images")
    p.add_argument("--in", dest="input", required=True, help="image file or directory")
    p.add_argument("--gsf", required=True, help="GsfParams JSON")
    p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--report", help="DeglareReport JSON")
    _add_deglare_flags(p)
    p.set_defaults(func=cmd_deglare)

    p = sub.add_parser("encode", help="apply a transfer function and quantize")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help=".png (16-bit container) or .pfm")
    p.add_argument("--tf", default="gamma:2.2", help="gamma:G | log:N | linear:m,c (default: %(default)s)")
    p.add_argument("--quant-bits", type=int, default=None, help="output bit depth (default: none)")
    p.add_argument("--ceiling", type=float, default=None, help="normalisation for gamma/linear (default: image max)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("score", help="score perception outputs against ground truth")
    p.add_argument("--metric", required=True, choices=["miou", "map", "mota", "motp", "rmse-lane", "rmse-depth"])
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", help="depth validity mask image")
    p.add_argument("--iou-thresh", type=float, default=0.5, help="matching threshold (default: %(default)s)")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--csv", help="CSV report path")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synth", help="generate a synthetic scene and its degraded capture")
    p.add_argument("--spec", help="SceneSpec JSON (default: seeded tunnel scene)")
    p.add_argument("--size", type=int, default=128, help="tunnel scene size (default: %(default)s)")
    p.add_argument("--channels", type=int, default=1, choices=[1, 3], help="tunnel scene channels (default: %(default)s)")
    p.add_argument("--gsf", help="GsfParams JSON (default: 0.9, 0.004, 0.3, 0.9)")
    p.add_argument("--ceiling", type=float, default=1.0, help="clip level (default: %(default)s)")
    p.add_argument("--noise", type=float, default=0.0, help="noise sigma relative to the ceiling (default: %(default)s)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="run the configured camera pipeline")
    p.add_argument("--config", required=True, help="PipelineConfig JSON")
    p.set_defaults(func=cmd_pipeline)
    return ap


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"code": code, "message": message}) + "\n")
    return status


def main(argv=None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    _setup_logging(ns.log_level)
    if ns.jobs < 1:
        return _fail("cli.usage", "--jobs must be at least 1", 2)
    t0 = time.perf_counter()
    try:
        status = ns.func(ns)
    except UsageError as exc:
        return _fail("cli.usage", str(exc), 2)
    except GlareKitError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), default=str) + "\n")
        return 1
    except FileNotFoundError as exc:
        return _fail("cli.io", f"file not found: {exc.filename}", 1)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return _fail("cli.error", f"{type(exc).__name__}: {exc}", 1)
    except Exception as exc:  # keep the JSON error contract for unexpected failures
        log.debug("unhandled error", exc_info=True)
        return _fail("cli.internal", f"{type(exc).__name__}: {exc}", 1)
    log.info("%s finished in %.3f s", ns.command, time.perf_counter() - t0)
    return status


if __name__ == "__main__":
    sys.exit(main())
