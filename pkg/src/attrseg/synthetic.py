"""Deterministic synthetic scene generator with exact instance annotations.

Scenes are grayscale float images with a horizontal platform line; instances
above the line carry position=1, below carry position=0. Each category is a
parametric polygon with a distinctive fill intensity, and states are realized
geometrically: standing shapes are taller than wide, lying shapes are the
standing shapes rotated a quarter turn, deformation shapes have a jagged
perturbed outline. Texture realism is a non-goal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .annotations import AnnotationSet, ImageInfo, InstanceAnnotation, write_dataset, write_pgm
from .geometry import BBox, PolygonMask, bbox_iou, rasterize
from .labels import LabelSpace


@dataclass
class SyntheticConfig:
    num_images: int = 16
    height: int = 96
    width: int = 96
    min_instances: int = 1
    max_instances: int = 3
    seed: int = 0
    category_weights: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("image size must be at least 32x32")
        if self.num_images < 1 or self.min_instances < 1:
            raise ValueError("counts must be >= 1")
        if self.max_instances < self.min_instances:
            raise ValueError("max_instances < min_instances")


GROUND_SHADE = 0.12
PLATFORM_SHADE = 0.32
LINE_SHADE = 0.0
NOISE_SIGMA = 0.02


STRIPE_PERIOD = 3
STRIPE_DROP = 0.22


def category_intensity(category_id: int) -> float:
    """Base fill shade; categories share 5 levels, disambiguated by texture."""
    return 0.46 + 0.12 * (category_id % 5)


def category_striped(category_id: int) -> bool:
    """Categories 5-9 are rendered with horizontal stripes."""
    return category_id >= 5


def _fill_values(category_id: int, ys: np.ndarray) -> np.ndarray:
    """Per-pixel fill for the given pixel row indices."""
    base = category_intensity(category_id)
    if not category_striped(category_id):
        return np.full(ys.shape, base)
    dark = (ys // STRIPE_PERIOD) % 2 == 1
    return np.where(dark, base - STRIPE_DROP, base)


def _canonical_shape(category_id: int, rng: np.random.Generator) -> List[Tuple[float, float]]:
    """Unit-ish polygon centered at the origin, in its upright form.
    Stateful categories (0..3) are strictly taller than wide."""
    if category_id == 0:  # bottle: body with a narrower neck
        return [(-0.30, 0.55), (0.30, 0.55), (0.30, -0.15), (0.12, -0.35),
                (0.12, -0.55), (-0.12, -0.55), (-0.12, -0.35), (-0.30, -0.15)]
    if category_id == 1:  # cup: trapezoid, wider at the top
        return [(-0.38, 0.5), (0.38, 0.5), (0.28, -0.5), (-0.28, -0.5)]
    if category_id == 2:  # box: tall rectangle
        return [(-0.34, 0.5), (0.34, 0.5), (0.34, -0.5), (-0.34, -0.5)]
    if category_id == 3:  # can: squat-ish but still upright rectangle, cut corners
        return [(-0.32, 0.46), (0.32, 0.46), (0.38, 0.34), (0.38, -0.34),
                (0.32, -0.46), (-0.32, -0.46), (-0.38, -0.34), (-0.38, 0.34)]
    if category_id == 4:  # paper ball: wobbly circle
        pts = []
        for k in range(12):
            ang = 2 * math.pi * k / 12
            r = 0.45 + rng.uniform(-0.06, 0.06)
            pts.append((r * math.cos(ang), r * math.sin(ang)))
        return pts
    if category_id == 5:  # bag: wide-bottomed trapezoid with handle notch
        return [(-0.15, 0.5), (0.15, 0.5), (0.45, -0.5), (-0.45, -0.5)]
    if category_id == 6:  # peel: diamond wedge
        return [(0.0, 0.45), (0.5, 0.0), (0.0, -0.45), (-0.5, 0.0)]
    if category_id == 7:  # toy: five-point star
        pts = []
        for k in range(10):
            ang = math.pi / 2 + math.pi * k / 5
            r = 0.5 if k % 2 == 0 else 0.22
            pts.append((r * math.cos(ang), -r * math.sin(ang)))
        return pts
    if category_id == 8:  # cigarette: thin horizontal sliver
        return [(-0.5, 0.12), (0.5, 0.12), (0.5, -0.12), (-0.5, -0.12)]
    # trash bin: big trapezoid, narrow at the bottom
    return [(-0.5, 0.5), (0.5, 0.5), (0.38, -0.5), (-0.38, -0.5)]


def _apply_state(pts: List[Tuple[float, float]], state: Optional[int],
                 rng: np.random.Generator) -> List[Tuple[float, float]]:
    if state == 1:  # lying: quarter turn, so width strictly exceeds height
        return [(y, -x) for (x, y) in pts]
    if state == 2:  # deformation: jagged and squashed to a square-ish aspect,
        # so aspect ratio alone separates the three states
        jag = [(x + rng.uniform(-0.15, 0.15), y + rng.uniform(-0.15, 0.15))
               for (x, y) in pts]
        xs = [p[0] for p in jag]
        ys = [p[1] for p in jag]
        sx = (max(xs) - min(xs)) or 1.0
        sy = (max(ys) - min(ys)) or 1.0
        side = math.sqrt(sx * sy)
        return [(x * side / sx, y * side / sy) for (x, y) in jag]
    return list(pts)


def _place_instance(category_id: int, state: Optional[int], position: int,
                    cfg: SyntheticConfig, line_y: float,
                    rng: np.random.Generator) -> Optional[PolygonMask]:
    base = min(cfg.height, cfg.width)
    size = rng.uniform(0.32, 0.42) * base
    if category_id == 9:  # trash bins run large
        size = rng.uniform(0.40, 0.48) * base
    pts = _apply_state(_canonical_shape(category_id, rng), state, rng)
    if category_id == 8:
        # keep cigarettes at least ~7 px thick so they rasterize reliably
        min_half = 4.5 / size
        pts = [(x, math.copysign(max(abs(y), min_half), y)) for (x, y) in pts]
    xs = [p[0] * size for p in pts]
    ys = [p[1] * size for p in pts]
    hw = (max(xs) - min(xs)) / 2.0
    hh = (max(ys) - min(ys)) / 2.0
    margin = 2.0
    if position == 1:
        lo, hi = margin + hh, line_y - hh - 2.0
    else:
        lo, hi = line_y + hh + 3.0, cfg.height - margin - hh
    if hi <= lo:
        return None
    cy = rng.uniform(lo, hi)
    cx = rng.uniform(margin + hw, cfg.width - margin - hw)
    cx0 = (max(xs) + min(xs)) / 2.0
    cy0 = (max(ys) + min(ys)) / 2.0
    ring = []
    for x, y in zip(xs, ys):
        ring.extend([round(x - cx0 + cx, 2), round(y - cy0 + cy, 2)])
    return PolygonMask.from_rings([ring])


def generate_synthetic(cfg: SyntheticConfig) -> Tuple[AnnotationSet, Dict[int, np.ndarray]]:
    """Render `cfg.num_images` scenes; returns the annotation set plus the
    float images keyed by image id. Deterministic function of the seed."""
    rng = np.random.default_rng(cfg.seed)
    space = LabelSpace()
    weights = np.asarray(cfg.category_weights if cfg.category_weights is not None
                         else np.ones(10), dtype=np.float64)
    if weights.shape != (10,) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("category_weights must be 10 non-negative values")
    weights = weights / weights.sum()

    images: List[ImageInfo] = []
    annotations: List[InstanceAnnotation] = []
    rendered: Dict[int, np.ndarray] = {}
    ann_id = 0
    for image_id in range(cfg.num_images):
        line_y = rng.uniform(0.44, 0.56) * cfg.height
        canvas = np.full((cfg.height, cfg.width), GROUND_SHADE)
        canvas[: int(line_y), :] = PLATFORM_SHADE
        canvas[int(line_y): int(line_y) + 2, :] = LINE_SHADE

        n_instances = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        boxes: List[BBox] = []
        for _ in range(n_instances):
            placed = False
            for _attempt in range(30):
                category_id = int(rng.choice(10, p=weights))
                state = int(rng.integers(0, 3)) if space.is_stateful(category_id) else None
                position = int(rng.integers(0, 2))
                poly = _place_instance(category_id, state, position, cfg, line_y, rng)
                if poly is None:
                    continue
                box = poly.vertex_bbox()
                if any(bbox_iou(box, b) > 0.05 for b in boxes):
                    continue
                mask = rasterize(poly, cfg.height, cfg.width)
                area = mask.count()
                if area < 16:
                    continue
                inside = mask.bits.astype(bool)
                rows = np.nonzero(inside)[0]
                canvas[inside] = _fill_values(category_id, rows)
                annotations.append(InstanceAnnotation(
                    id=ann_id, image_id=image_id, category_id=category_id,
                    bbox=[round(v, 2) for v in box.to_xywh()],
                    segmentation=poly, area=float(area),
                    position=position, state=state))
                ann_id += 1
                boxes.append(box)
                placed = True
                break
            if not placed:
                continue
        canvas = np.clip(canvas + rng.normal(0.0, NOISE_SIGMA, canvas.shape), 0.0, 1.0)
        images.append(ImageInfo(id=image_id, file_name=f"img_{image_id:05d}.pgm",
                                width=cfg.width, height=cfg.height))
        rendered[image_id] = canvas
    return AnnotationSet(images=images, annotations=annotations, space=space), rendered


def write_synthetic(aset: AnnotationSet, rendered: Dict[int, np.ndarray], out_dir) -> Path:
    """Write annotations.json plus one PGM per image; returns the json path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for im in aset.images:
        write_pgm(out / im.file_name, rendered[im.id])
    ann_path = out / "annotations.json"
    write_dataset(aset, ann_path)
    return ann_path
