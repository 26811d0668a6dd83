"""Boxes, polygon masks, bitmasks, RLE, and IoU/GIoU machinery.

Rasterization uses the pixel-center even-odd rule: pixel (r, c) is set iff
the point (c + 0.5, r + 0.5) is strictly inside the polygon. RLE is
column-major with the zero-run first, matching the de-facto COCO layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


class FormatError(ValueError):
    """Malformed geometric payload (degenerate ring, bad run counts, ...)."""


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in corner form, pixels."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise ContractError(f"non-finite box {vals}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ContractError(f"inverted box {vals}")

    @classmethod
    def from_xywh(cls, xywh: Sequence[float]) -> "BBox":
        x, y, w, h = xywh
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> List[float]:
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class PolygonMask:
    """One or more rings, each a flat [x0, y0, x1, y1, ...] vertex list."""

    rings: Tuple[Tuple[float, ...], ...]

    @classmethod
    def from_rings(cls, rings: Sequence[Sequence[float]]) -> "PolygonMask":
        cleaned = []
        for ring in rings:
            flat = tuple(float(v) for v in ring)
            if len(flat) < 6 or len(flat) % 2 != 0:
                raise FormatError(f"ring needs >= 3 (x, y) vertices, got {len(flat)} values")
            if not all(np.isfinite(v) for v in flat):
                raise FormatError("non-finite polygon vertex")
            cleaned.append(flat)
        if not cleaned:
            raise FormatError("polygon with no rings")
        return cls(tuple(cleaned))

    def vertex_bbox(self) -> BBox:
        xs = [v for ring in self.rings for v in ring[0::2]]
        ys = [v for ring in self.rings for v in ring[1::2]]
        return BBox(min(xs), min(ys), max(xs), max(ys))

    def shifted(self, dx: float, dy: float) -> "PolygonMask":
        out = []
        for ring in self.rings:
            moved = list(ring)
            moved[0::2] = [x + dx for x in ring[0::2]]
            moved[1::2] = [y + dy for y in ring[1::2]]
            out.append(moved)
        return PolygonMask.from_rings(out)


@dataclass
class BitMask:
    height: int
    width: int
    bits: np.ndarray  # (height, width) uint8 in {0, 1}

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != (self.height, self.width):
            raise ContractError(
                f"bits shape {self.bits.shape} != ({self.height}, {self.width})")

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, BitMask) and self.height == other.height
                and self.width == other.width
                and bool(np.array_equal(self.bits, other.bits)))

    def tight_bbox(self) -> BBox:
        rows, cols = np.nonzero(self.bits)
        if rows.size == 0:
            raise ContractError("tight_bbox of empty mask")
        return BBox(float(cols.min()), float(rows.min()),
                    float(cols.max() + 1), float(rows.max() + 1))


@dataclass
class RleMask:
    """Column-major run lengths, zero-run first."""

    height: int
    width: int
    counts: List[int]

    def __post_init__(self):
        total = sum(self.counts)
        if total != self.height * self.width:
            raise FormatError(
                f"run counts sum {total} != {self.height}x{self.width}")
        if any(c < 0 for c in self.counts):
            raise FormatError("negative run count")


def rasterize(poly: PolygonMask, height: int, width: int) -> BitMask:
    """Even-odd fill of all rings at pixel centers; rings union together."""
    if height < 1 or width < 1:
        raise ContractError(f"grid {height}x{width} invalid")
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    px = np.broadcast_to(cx[None, :], (height, width))
    py = np.broadcast_to(cy[:, None], (height, width))
    out = np.zeros((height, width), dtype=np.uint8)
    for ring in poly.rings:
        xs = np.asarray(ring[0::2])
        ys = np.asarray(ring[1::2])
        inside = np.zeros((height, width), dtype=bool)
        n = xs.size
        for i in range(n):
            x0, y0 = xs[i], ys[i]
            x1, y1 = xs[(i + 1) % n], ys[(i + 1) % n]
            if y0 == y1:
                continue
            crosses = (y0 <= py) != (y1 <= py)
            with np.errstate(invalid="ignore"):
                xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (px < xint)
        out |= inside.astype(np.uint8)
    return BitMask(height, width, out)


def bbox_iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def giou(a: BBox, b: BBox) -> float:
    if a.area() <= 0 or b.area() <= 0:
        raise ContractError("giou requires boxes with positive area")
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area() + b.area() - inter
    hull = ((max(a.x2, b.x2) - min(a.x1, b.x1))
            * (max(a.y2, b.y2) - min(a.y1, b.y1)))
    return inter / union - (hull - union) / hull


def mask_iou(a: BitMask, b: BitMask) -> float:
    if (a.height, a.width) != (b.height, b.width):
        raise ContractError(
            f"mask size mismatch {a.height}x{a.width} vs {b.height}x{b.width}")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        raise ContractError("mask_iou of two empty masks")
    return inter / union


def rle_encode(m: BitMask) -> RleMask:
    flat = m.bits.flatten(order="F")
    if flat.size == 0:
        return RleMask(m.height, m.width, [0])
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return RleMask(m.height, m.width, [int(c) for c in counts])


def rle_decode(r: RleMask) -> BitMask:
    flat = np.zeros(r.height * r.width, dtype=np.uint8)
    pos = 0
    val = 0
    for c in r.counts:
        if val:
            flat[pos:pos + c] = 1
        pos += c
        val ^= 1
    return BitMask(r.height, r.width, flat.reshape((r.height, r.width), order="F"))
