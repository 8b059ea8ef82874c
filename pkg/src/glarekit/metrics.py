"""Scoring harness for perception outputs: region IoU, AP/mAP, CLEAR-MOT
tracking scores and RMSE for lane points and relative depth.

Boxes cover the pixels whose centres fall inside ``[x1, x2) x [y1, y2)``,
so integer boxes cover exactly ``(x2 - x1) * (y2 - y1)`` pixels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BoundingBox",
    "DetectionSet",
    "TrackFrame",
    "LanePointSet",
    "box_iou",
    "miou",
    "average_precision",
    "mean_ap",
    "mota_motp",
    "rmse_pairs",
    "rmse_points",
    "rmse_depth",
    "load_detections",
    "load_tracks",
    "load_lanes",
    "write_report",
]


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: str = ""
    score: float = 1.0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_dict(self) -> dict:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2,
                "class": self.class_id, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]),
                   str(d.get("class", "")), float(d.get("score", 1.0)))


@dataclass(frozen=True)
class DetectionSet:
    image_id: str
    boxes: tuple = ()

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def by_class(self) -> dict[str, list[BoundingBox]]:
        out: dict[str, list[BoundingBox]] = {}
        for b in self.boxes:
            out.setdefault(b.class_id, []).append(b)
        return out


@dataclass(frozen=True)
class TrackFrame:
    t: int
    entries: tuple = ()  # (track_id, BoundingBox) pairs

    def __post_init__(self):
        entries = tuple((str(i), b) for i, b in self.entries)
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate track ids in frame {self.t}")
        object.__setattr__(self, "entries", entries)


@dataclass(frozen=True, eq=False)
class LanePointSet:
    points: np.ndarray  # (N, 2) of (x, y)
    image_id: str = ""
    bounds: tuple[int, int] | None = None  # (height, width) when known

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(p) < 2:
            raise ValueError("a lane needs at least two points")
        if not np.all(np.isfinite(p)):
            raise ValueError("lane points must be finite")
        if self.bounds is not None:
            h, w = self.bounds
            if p[:, 0].min() < 0 or p[:, 0].max() > w or p[:, 1].min() < 0 or p[:, 1].max() > h:
                raise ValueError("lane points fall outside the image")
        object.__setattr__(self, "points", p)


# --- region IoU ----------------------------------------------------------------


def _pixel_span(lo: float, hi: float) -> tuple[int, int]:
    # pixels i with lo <= i + 0.5 < hi
    return math.ceil(lo - 0.5), math.ceil(hi - 0.5)


def _raster(boxes: Iterable[BoundingBox], shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for b in boxes:
        x0, x1 = _pixel_span(b.x1, b.x2)
        y0, y1 = _pixel_span(b.y1, b.y2)
        m[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
    return m


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Continuous IoU of two boxes, used for matching."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def miou(pred: DetectionSet | Sequence[BoundingBox], ref: DetectionSet | Sequence[BoundingBox]) -> float:
    """IoU of the pixel unions of all predicted and all reference boxes."""
    pb = list(pred.boxes if isinstance(pred, DetectionSet) else pred)
    rb = list(ref.boxes if isinstance(ref, DetectionSet) else ref)
    if not pb and not rb:
        return 1.0
    if not pb or not rb:
        return 0.0
    allb = pb + rb
    h = max(0, math.ceil(max(b.y2 for b in allb)))
    w = max(0, math.ceil(max(b.x2 for b in allb)))
    p = _raster(pb, (h, w))
    r = _raster(rb, (h, w))
    union = np.count_nonzero(p | r)
    if union == 0:
        return 1.0  # every box is thinner than a pixel
    return np.count_nonzero(p & r) / union


# --- AP ------------------------------------------------------------------------


def _greedy_tp(preds: Sequence[BoundingBox], refs: Sequence[BoundingBox], thr: float) -> np.ndarray:
    """True-positive flags for predictions already sorted by score."""
    used = np.zeros(len(refs), dtype=bool)
    tp = np.zeros(len(preds), dtype=bool)
    for i, p in enumerate(preds):
        best, best_j = thr, -1
        for j, r in enumerate(refs):
            if used[j]:
                continue
            iou = box_iou(p, r)
            if iou >= best:
                best, best_j = iou, j
                if iou == 1.0:
                    break
        if best_j >= 0:
            used[best_j] = True
            tp[i] = True
    return tp


def average_precision(preds: Sequence[BoundingBox], refs: Sequence[BoundingBox],
                      iou_thresh: float = 0.5) -> float:
    """AP as the recall-step-weighted precision over the ranked sweep.

    Ties in score keep the input order (stable sort).
    """
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must be in (0, 1)")
    if not refs:
        return 1.0 if not preds else 0.0
    if not preds:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    ranked = [preds[i] for i in order]
    tp = _greedy_tp(ranked, refs, iou_thresh)
    ctp = np.cumsum(tp)
    recall = ctp / len(refs)
    precision = ctp / np.arange(1, len(ranked) + 1)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def mean_ap(per_class_preds: dict, per_class_refs: dict, iou_thresh: float = 0.5) -> float:
    """Unweighted mean of per-class AP over the classes present in ``refs``."""
    classes = sorted(c for c, r in per_class_refs.items() if len(r))
    if not classes:
        raise ValueError("no reference classes to average over")
    aps = [average_precision(per_class_preds.get(c, []), per_class_refs[c], iou_thresh) for c in classes]
    return float(np.mean(aps))


# --- tracking ------------------------------------------------------------------


@dataclass
class TrackingScore:
    mota: float
    motp: float
    fn: int = 0
    fp: int = 0
    ids: int = 0
    gt: int = 0
    matches: int = 0
    details: list = field(default_factory=list)


def mota_motp(pred_frames: Sequence[TrackFrame], ref_frames: Sequence[TrackFrame],
              iou_thresh: float = 0.5, full: bool = False):
    """CLEAR-MOT accuracy and precision.

    Each frame first keeps last frame's pairs that still overlap enough,
    then matches the rest greedily by IoU.  An identity switch is counted
    when a reference track is matched to a different prediction id than at
    its previous match.  The distance per match is ``1 - IoU``.
    """
    preds = {f.t: f for f in pred_frames}
    refs = {f.t: f for f in ref_frames}
    fn = fp = ids = gt = matches = 0
    dist = 0.0
    prev_pairs: dict[str, str] = {}  # ref id -> pred id in the previous frame
    last_match: dict[str, str] = {}
    details = []
    for t in sorted(set(preds) | set(refs)):
        r_entries = dict(refs[t].entries) if t in refs else {}
        p_entries = dict(preds[t].entries) if t in preds else {}
        pairs: dict[str, str] = {}
        for rid, pid in prev_pairs.items():
            if rid in r_entries and pid in p_entries and box_iou(r_entries[rid], p_entries[pid]) >= iou_thresh:
                pairs[rid] = pid
        taken = set(pairs.values())
        cand = []
        for rid in sorted(r_entries):
            if rid in pairs:
                continue
            for pid in sorted(p_entries):
                if pid in taken:
                    continue
                iou = box_iou(r_entries[rid], p_entries[pid])
                if iou >= iou_thresh:
                    cand.append((-iou, rid, pid))
        for _, rid, pid in sorted(cand):
            if rid in pairs or pid in taken:
                continue
            pairs[rid] = pid
            taken.add(pid)

        f_ids = 0
        for rid, pid in pairs.items():
            if rid in last_match and last_match[rid] != pid:
                f_ids += 1
            last_match[rid] = pid
            dist += 1.0 - box_iou(r_entries[rid], p_entries[pid])
        f_fn = len(r_entries) - len(pairs)
        f_fp = len(p_entries) - len(pairs)
        fn += f_fn
        fp += f_fp
        ids += f_ids
        gt += len(r_entries)
        matches += len(pairs)
        details.append({"t": t, "fn": f_fn, "fp": f_fp, "ids": f_ids, "gt": len(r_entries)})
        prev_pairs = pairs
    if gt == 0:
        raise ValueError("MOTA is undefined without ground-truth objects")
    mota = 1.0 - (fn + fp + ids) / gt
    motp = 1.0 - dist / matches if matches else 0.0
    if full:
        return TrackingScore(mota, motp, fn, fp, ids, gt, matches, details)
    return mota, motp


# --- RMSE ----------------------------------------------------------------------


def rmse_pairs(actual, predicted) -> float:
    """RMSE over corresponding 2-D points: ``sqrt(mean(|a_i - p_i|^2))``."""
    a = np.asarray(actual, dtype=float).reshape(-1, 2)
    p = np.asarray(predicted, dtype=float).reshape(-1, 2)
    if len(a) == 0 or a.shape != p.shape:
        raise ValueError("point arrays must be non-empty and the same length")
    return float(np.sqrt(np.mean(np.sum((a - p) ** 2, axis=1))))


def _x_at_rows(points: np.ndarray, rows: np.ndarray) -> np.ndarray:
    order = np.argsort(points[:, 1], kind="stable")
    y = points[order, 1]
    x = points[order, 0]
    return np.interp(rows, y, x)


def rmse_points(pred: LanePointSet, ref: LanePointSet) -> float:
    """Lane RMSE after resampling both polylines at the integer rows spanned
    by the reference.  The prediction is held constant past its ends."""
    if not isinstance(pred, LanePointSet):
        pred = LanePointSet(pred)
    if not isinstance(ref, LanePointSet):
        ref = LanePointSet(ref)
    y = ref.points[:, 1]
    rows = np.arange(math.ceil(y.min()), math.floor(y.max()) + 1, dtype=float)
    if rows.size == 0:
        raise ValueError("the reference lane spans no integer row")
    a = np.column_stack([_x_at_rows(ref.points, rows), rows])
    p = np.column_stack([_x_at_rows(pred.points, rows), rows])
    return rmse_pairs(a, p)


def rmse_depth(pred, ref, mask=None) -> float:
    """RMSE over ``mask`` after scaling ``pred`` by ``median(ref / pred)``."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"depth maps differ in shape: {pred.shape} vs {ref.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(ref))):
        raise ValueError("depth maps must be finite")
    m = np.ones(ref.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    m = m & (pred != 0)
    if not m.any():
        raise ValueError("depth mask selects no pixels")
    scale = float(np.median(ref[m] / pred[m]))
    return float(np.sqrt(np.mean((scale * pred[m] - ref[m]) ** 2)))


# --- file I/O ------------------------------------------------------------------


def _jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: {exc.msg}") from None
    return out


def load_detections(path) -> list[DetectionSet]:
    return [DetectionSet(str(r["image_id"]), [BoundingBox.from_dict(b) for b in r.get("boxes", [])])
            for r in _jsonl(path)]


def load_tracks(path) -> list[TrackFrame]:
    return [TrackFrame(int(r["t"]), [(e["id"], BoundingBox.from_dict(e["box"])) for e in r.get("entries", [])])
            for r in _jsonl(path)]


def load_lanes(path) -> list[LanePointSet]:
    return [LanePointSet(r["points"], str(r.get("image_id", ""))) for r in _jsonl(path)]


def write_report(records: Sequence[dict], json_path=None, csv_path=None) -> None:
    """Write ``{metric, value, support}`` records as JSON and/or CSV."""
    if json_path is not None:
        Path(json_path).write_text(json.dumps(list(records), indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["metric", "value", "support"], extrasaction="ignore")
            wr.writeheader()
            for r in records:
                wr.writerow(r)
