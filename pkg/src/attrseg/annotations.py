"""Dataset model and COCO-superset JSON parsing / validation / writing.

The on-disk format is standard COCO instance JSON plus two integer fields
per annotation: `position` (0 ground / 1 platform) and, for stateful
categories only, `state` (0 standing / 1 lying / 2 deformation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import BBox, FormatError, PolygonMask
from .labels import LabelSpace


class ParseError(ValueError):
    pass


@dataclass
class ValidationError(ValueError):
    diagnostics: List[str]

    def __str__(self) -> str:
        return "; ".join(self.diagnostics)


@dataclass
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class InstanceAnnotation:
    id: int
    image_id: int
    category_id: int
    bbox: List[float]  # COCO [x, y, w, h]
    segmentation: PolygonMask
    area: float
    position: int
    state: Optional[int] = None
    iscrowd: int = 0

    def bbox_corners(self) -> BBox:
        return BBox.from_xywh(self.bbox)


@dataclass
class AnnotationSet:
    images: List[ImageInfo]
    annotations: List[InstanceAnnotation]
    space: LabelSpace = field(default_factory=LabelSpace)

    def image_by_id(self, image_id: int) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(f"no image with id {image_id}")

    def annotations_for(self, image_id: int) -> List[InstanceAnnotation]:
        return [a for a in self.annotations if a.image_id == image_id]


BBOX_POLY_TOL = 1.0  # pixels; bbox must hug the polygon this tightly


def validate(aset: AnnotationSet) -> List[str]:
    """Collect schema diagnostics; empty list means the set is clean."""
    diags: List[str] = []
    space = aset.space
    image_ids = set()
    for im in aset.images:
        if im.id in image_ids:
            diags.append(f"duplicate image id {im.id}")
        image_ids.add(im.id)
        if im.width < 1 or im.height < 1:
            diags.append(f"image {im.id} has degenerate size {im.width}x{im.height}")
    ann_ids = set()
    for a in aset.annotations:
        if a.id in ann_ids:
            diags.append(f"duplicate annotation id {a.id}")
        ann_ids.add(a.id)
        if a.image_id not in image_ids:
            diags.append(f"annotation {a.id} references unknown image {a.image_id}")
        if not (0 <= a.category_id < len(space.categories)):
            diags.append(f"annotation {a.id} has unknown category {a.category_id}")
            continue
        stateful = space.is_stateful(a.category_id)
        if stateful and a.state is None:
            diags.append(f"annotation {a.id} ({space.categories[a.category_id]}) "
                         "is missing required 'state'")
        if not stateful and a.state is not None:
            diags.append(f"annotation {a.id} ({space.categories[a.category_id]}) "
                         "must not carry 'state'")
        if a.state is not None and a.state not in (0, 1, 2):
            diags.append(f"annotation {a.id} has invalid state {a.state}")
        if a.position not in (0, 1):
            diags.append(f"annotation {a.id} has invalid position {a.position}")
        if a.iscrowd != 0:
            diags.append(f"annotation {a.id} has unsupported iscrowd {a.iscrowd}")
        try:
            box = a.bbox_corners()
            vb = a.segmentation.vertex_bbox()
        except (FormatError, ValueError) as e:
            diags.append(f"annotation {a.id}: {e}")
            continue
        if (abs(box.x1 - vb.x1) > BBOX_POLY_TOL or abs(box.y1 - vb.y1) > BBOX_POLY_TOL
                or abs(box.x2 - vb.x2) > BBOX_POLY_TOL
                or abs(box.y2 - vb.y2) > BBOX_POLY_TOL):
            diags.append(f"annotation {a.id}: bbox {a.bbox} does not tightly "
                         f"contain its polygon (vertex bbox {vb})")
    return diags


def _ann_from_json(obj: dict, space: LabelSpace) -> InstanceAnnotation:
    try:
        seg = PolygonMask.from_rings(obj["segmentation"])
        return InstanceAnnotation(
            id=int(obj["id"]),
            image_id=int(obj["image_id"]),
            category_id=int(obj["category_id"]),
            bbox=[float(v) for v in obj["bbox"]],
            segmentation=seg,
            area=float(obj["area"]),
            position=int(obj["position"]),
            state=int(obj["state"]) if "state" in obj and obj["state"] is not None else None,
            iscrowd=int(obj.get("iscrowd", 0)),
        )
    except (KeyError, TypeError, ValueError, FormatError) as e:
        raise ParseError(f"bad annotation record {obj.get('id', '?')}: {e}") from e


def parse_dataset(path) -> AnnotationSet:
    """Load and fully validate an annotation file."""
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON at byte {e.pos}: {e.msg}") from e
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ParseError(f"missing top-level key '{key}'")
    space = LabelSpace()
    images = [ImageInfo(int(i["id"]), str(i["file_name"]),
                        int(i["width"]), int(i["height"]))
              for i in doc["images"]]
    annotations = [_ann_from_json(a, space) for a in doc["annotations"]]
    aset = AnnotationSet(images=images, annotations=annotations, space=space)
    diags = validate(aset)
    if diags:
        raise ValidationError(diags)
    return aset


def _categories_json(space: LabelSpace) -> List[dict]:
    return [{"id": i, "name": name} for i, name in enumerate(space.categories)]


def to_json_dict(aset: AnnotationSet) -> dict:
    anns = []
    for a in aset.annotations:
        rec = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": a.bbox,
            "segmentation": [list(r) for r in a.segmentation.rings],
            "area": a.area,
            "iscrowd": a.iscrowd,
            "position": a.position,
        }
        if a.state is not None:
            rec["state"] = a.state
        anns.append(rec)
    return {
        "images": [{"id": i.id, "file_name": i.file_name,
                    "width": i.width, "height": i.height} for i in aset.images],
        "annotations": anns,
        "categories": _categories_json(aset.space),
    }


def write_dataset(aset: AnnotationSet, path) -> None:
    diags = validate(aset)
    if diags:
        raise ValidationError(diags)
    payload = json.dumps(to_json_dict(aset), indent=1, sort_keys=True)
    Path(path).write_text(payload, encoding="utf-8")


def split_dataset(aset: AnnotationSet, fraction: float,
                  seed: int) -> Tuple[AnnotationSet, AnnotationSet]:
    """Disjoint, exhaustive image-level split; `fraction` goes to train."""
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction {fraction} outside (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(aset.images))
    n_train = int(round(fraction * len(aset.images)))
    train_idx = set(order[:n_train].tolist())
    train_imgs = [im for i, im in enumerate(aset.images) if i in train_idx]
    val_imgs = [im for i, im in enumerate(aset.images) if i not in train_idx]
    train_ids = {im.id for im in train_imgs}
    train = AnnotationSet(
        images=train_imgs,
        annotations=[a for a in aset.annotations if a.image_id in train_ids],
        space=aset.space)
    val = AnnotationSet(
        images=val_imgs,
        annotations=[a for a in aset.annotations if a.image_id not in train_ids],
        space=aset.space)
    return train, val


# ---------------------------------------------------------------------------
# PGM image i/o (synthetic images are 8-bit grayscale)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as binary P5, maxval 255."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    bytes_ = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w = bytes_.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes_.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file back to float64 in [0, 1]."""
    raw = Path(path).read_bytes()
    fields: List[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ParseError(f"not a binary PGM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape((h, w)).astype(np.float64) / 255.0
