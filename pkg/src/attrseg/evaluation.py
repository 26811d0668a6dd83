"""COCO-style average precision over the 36 attribute combos, plus
per-category and per-attribute breakdowns and an FPS benchmark.

AP uses 101-point interpolation over IoU thresholds 0.50:0.05:0.95; AP50 is
the single 0.50 threshold. Matching is greedy: detections in score order
claim the highest-IoU unmatched ground truth in their image.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .annotations import AnnotationSet
from .geometry import BBox, BitMask, bbox_iou, mask_iou, rasterize, rle_decode
from .labels import ComboTable, LabelSpace, build_combo_table
from .model import InstancePrediction

IOU_THRESHOLDS = [0.50 + 0.05 * i for i in range(10)]
RECALL_SAMPLES = np.linspace(0.0, 1.0, 101)
ATTRIBUTE_ROWS = ["ground", "platform", "standing", "lying", "deformation"]


class ContractError(ValueError):
    pass


@dataclass
class DetectionRecord:
    det_id: int
    image_id: int
    class_id: int
    score: float
    box: BBox
    mask: Optional[BitMask]


@dataclass
class GroundTruthRecord:
    image_id: int
    class_id: int
    box: BBox
    mask: Optional[BitMask]


@dataclass
class EvalReport:
    ap: float
    ap50: float
    per_category: Dict[str, float]
    per_attribute: Dict[str, float]
    fps: Optional[float] = None
    meta: Dict[str, object] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {"ap": self.ap, "ap50": self.ap50,
               "per_category": self.per_category,
               "per_attribute": self.per_attribute,
               "meta": self.meta}
        if self.fps is not None:
            out["fps"] = self.fps
        return out


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=1,
                                     sort_keys=True), encoding="utf-8")


def match_detections(dets: Sequence[DetectionRecord],
                     gts: Sequence[GroundTruthRecord],
                     iou_threshold: float, kind: str) -> List[bool]:
    """TP/FP flags for one class; `dets` must already be sorted by
    (score desc, det id asc). Each GT is claimed at most once."""
    iou_fn = _iou_fn(kind)
    taken: Dict[int, set] = {}
    flags: List[bool] = []
    for det in dets:
        best_iou, best_gt = 0.0, None
        for gi, gt in enumerate(gts):
            if gt.image_id != det.image_id:
                continue
            if gi in taken.get(det.image_id, set()):
                continue
            iou = iou_fn(det, gt)
            if iou > best_iou:
                best_iou, best_gt = iou, gi
        if best_gt is not None and best_iou >= iou_threshold:
            taken.setdefault(det.image_id, set()).add(best_gt)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _iou_fn(kind: str) -> Callable:
    if kind == "bbox":
        return lambda d, g: bbox_iou(d.box, g.box)
    if kind == "mask":
        def fn(d, g):
            if d.mask is None or g.mask is None:
                raise ContractError("mask evaluation requires masks")
            if d.mask.count() == 0 and g.mask.count() == 0:
                return 0.0
            if d.mask.count() == 0 or g.mask.count() == 0:
                return 0.0
            return mask_iou(d.mask, g.mask)
        return fn
    raise ContractError(f"unknown iou kind '{kind}'")


def average_precision(flags: Sequence[bool], n_gt: int) -> Optional[float]:
    """101-point interpolated AP. None means the class is skipped (no ground
    truth and no detections)."""
    if n_gt < 0:
        raise ContractError("n_gt must be >= 0")
    if n_gt == 0:
        return 0.0 if flags else None
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision at recall >= r
    interp = np.zeros_like(RECALL_SAMPLES)
    for i, r in enumerate(RECALL_SAMPLES):
        mask = recall >= r - 1e-12
        interp[i] = precision[mask].max() if mask.any() else 0.0
    return float(interp.mean())


def _sort_dets(dets: List[DetectionRecord]) -> List[DetectionRecord]:
    return sorted(dets, key=lambda d: (-d.score, d.det_id))


def _class_ap(dets: List[DetectionRecord], gts: List[GroundTruthRecord],
              thresholds: Sequence[float], kind: str) -> Optional[List[float]]:
    """AP per threshold for one class, or None when the class is skipped."""
    dets = _sort_dets(dets)
    out = []
    for t in thresholds:
        flags = match_detections(dets, gts, t, kind)
        ap = average_precision(flags, len(gts))
        if ap is None:
            return None
        out.append(ap)
    return out


def _mean(values: List[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def _gt_records(gt: AnnotationSet, class_of, kind: str) -> List[GroundTruthRecord]:
    out = []
    for a in gt.annotations:
        cls = class_of(a.category_id, a.state, a.position)
        if cls is None:
            continue
        im = gt.image_by_id(a.image_id)
        mask = (rasterize(a.segmentation, im.height, im.width)
                if kind == "mask" else None)
        out.append(GroundTruthRecord(image_id=a.image_id, class_id=cls,
                                     box=a.bbox_corners(), mask=mask))
    return out


def _det_records(preds: Dict[int, List[InstancePrediction]], class_of,
                 kind: str, max_per_image: int) -> List[DetectionRecord]:
    out = []
    det_id = 0
    for image_id in sorted(preds):
        ranked = sorted(preds[image_id], key=lambda p: -p.score)[:max_per_image]
        for p in ranked:
            cls = class_of(p.category_id, p.state, p.position)
            det_id += 1
            if cls is None:
                continue
            mask = rle_decode(p.mask) if kind == "mask" else None
            out.append(DetectionRecord(det_id=det_id, image_id=image_id,
                                       class_id=cls, score=p.score,
                                       box=p.box, mask=mask))
    return out


def _evaluate_classes(gts: List[GroundTruthRecord], dets: List[DetectionRecord],
                      class_ids: Sequence[int], thresholds: Sequence[float],
                      kind: str) -> Dict[int, Optional[List[float]]]:
    by_class_gt: Dict[int, List[GroundTruthRecord]] = {c: [] for c in class_ids}
    by_class_det: Dict[int, List[DetectionRecord]] = {c: [] for c in class_ids}
    for g in gts:
        by_class_gt.setdefault(g.class_id, []).append(g)
    for d in dets:
        by_class_det.setdefault(d.class_id, []).append(d)
    return {c: _class_ap(by_class_det.get(c, []), by_class_gt.get(c, []),
                         thresholds, kind)
            for c in class_ids}


def evaluate(gt: AnnotationSet, preds: Dict[int, List[InstancePrediction]],
             kind: str = "mask", max_per_image: int = 100,
             table: Optional[ComboTable] = None) -> EvalReport:
    """Full report: combo-level AP and AP50, attribute-agnostic per-category
    AP, and per-attribute AP (filter by attribute value, class = category,
    averaged over categories present)."""
    space = gt.space
    table = table or build_combo_table(space)
    image_ids = {im.id for im in gt.images}
    for image_id in preds:
        if image_id not in image_ids:
            raise ContractError(f"prediction references unknown image {image_id}")

    def combo_class(cat, state, pos):
        return table.lookup(cat, state, pos)

    combo_aps = _evaluate_classes(
        _gt_records(gt, combo_class, kind),
        _det_records(preds, combo_class, kind, max_per_image),
        list(range(len(table))), IOU_THRESHOLDS, kind)
    present = [v for v in combo_aps.values() if v is not None]
    ap = _mean([_mean(v) for v in present])
    ap50 = _mean([v[0] for v in present])

    def cat_class(cat, state, pos):
        return cat

    cat_aps = _evaluate_classes(
        _gt_records(gt, cat_class, kind),
        _det_records(preds, cat_class, kind, max_per_image),
        list(range(len(space.categories))), IOU_THRESHOLDS, kind)
    # all 10 rows always present; skipped categories report null
    per_category = {space.categories[c]: (_mean(v) if v is not None else None)
                    for c, v in cat_aps.items()}

    per_attribute = {}
    for attr in ATTRIBUTE_ROWS:
        def attr_class(cat, state, pos, _attr=attr):
            if _attr == "ground":
                return cat if pos == 0 else None
            if _attr == "platform":
                return cat if pos == 1 else None
            want = {"standing": 0, "lying": 1, "deformation": 2}[_attr]
            return cat if state == want else None

        aps = _evaluate_classes(
            _gt_records(gt, attr_class, kind),
            _det_records(preds, attr_class, kind, max_per_image),
            list(range(len(space.categories))), IOU_THRESHOLDS, kind)
        rows = [v for v in aps.values() if v is not None]
        per_attribute[attr] = _mean([_mean(v) for v in rows]) if rows else None

    return EvalReport(
        ap=ap, ap50=ap50, per_category=per_category,
        per_attribute=per_attribute,
        meta={"iou_thresholds": IOU_THRESHOLDS,
              "interpolation": "101pt",
              "kind": kind,
              "max_detections_per_image": max_per_image,
              "per_attribute_definition":
                  "filter instances by attribute value, use category as the "
                  "class, average over categories present"})


def measure_fps(infer_fn: Callable[[np.ndarray], object],
                images: Sequence[np.ndarray], repeats: int = 3) -> dict:
    """Median-based throughput of single-threaded inference over `images`.
    Returns {'fps', 'durations', 'max_min_ratio'}."""
    if not images:
        raise ContractError("measure_fps needs at least one image")
    if repeats < 3:
        raise ContractError("repeats must be >= 3")
    durations = []
    for _ in range(repeats):
        start = time.perf_counter()
        for img in images:
            infer_fn(img)
        durations.append(time.perf_counter() - start)
    median = statistics.median(durations)
    return {
        "fps": len(images) / median,
        "durations": durations,
        "max_min_ratio": max(durations) / min(durations),
    }
