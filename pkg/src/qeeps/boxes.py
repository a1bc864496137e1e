"""Detection geometry: boxes, anchors, IoU, offset coding, NMS, ROI pooling.

Boxes use the inclusive-exclusive pixel convention, so area is
(x2 - x1) * (y2 - y1) with x1 < x2 and y1 < y2.  Heavy paths work on
(N, 4) float arrays; the Box dataclass is the annotation currency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T

UNLABELED = -1  # person without an identity label


@dataclass
class Box:
    """Axis-aligned rectangle with optional score and identity label.

    id_label: identity index, UNLABELED (-1) for an unlabeled person,
    None when the box is not a person annotation.
    """
    x1: float
    y1: float
    x2: float
    y2: float
    score: float | None = None
    id_label: int | None = None

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2})")
        if self.score is not None and not np.isfinite(self.score):
            raise ValueError("box score must be finite")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


@dataclass
class AnchorGrid:
    """Prior boxes tiled at every feature cell.

    anchors: (cells * len(scales) * len(ratios), 4), cell-major row order,
    centers at feature-cell centers in image pixels.
    """
    stride: int
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    feat_h: int
    feat_w: int
    anchors: np.ndarray

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


def generate_anchors(image_size: tuple[int, int], stride: int,
                     scales: Sequence[float], ratios: Sequence[float]) -> AnchorGrid:
    """Tile scale/ratio anchor templates over the feature grid.

    An anchor with scale s and ratio r (r = height/width) has area
    (s * stride)^2, width s*stride/sqrt(r) and height s*stride*sqrt(r).
    """
    if not scales or not ratios:
        raise ValueError("generate_anchors: scales and ratios must be non-empty")
    h, w = image_size
    if h % stride or w % stride:
        raise ValueError(f"generate_anchors: stride {stride} does not divide image {image_size}")
    fh, fw = h // stride, w // stride
    templates = []
    for s in scales:
        for r in ratios:
            size = s * stride
            bw = size / np.sqrt(r)
            bh = size * np.sqrt(r)
            templates.append((-bw / 2, -bh / 2, bw / 2, bh / 2))
    templates = np.asarray(templates, dtype=np.float64)  # (K, 4)
    cy, cx = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
    centers_x = (cx.reshape(-1) + 0.5) * stride
    centers_y = (cy.reshape(-1) + 0.5) * stride
    shifts = np.stack([centers_x, centers_y, centers_x, centers_y], axis=1)  # (cells, 4)
    anchors = (shifts[:, None, :] + templates[None, :, :]).reshape(-1, 4)
    return AnchorGrid(stride=stride, scales=tuple(scales), ratios=tuple(ratios),
                      feat_h=fh, feat_w=fw, anchors=anchors)


def encode(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Box -> (dx, dy, dw, dh) offsets relative to anchors.

    dx = (gcx - acx) / aw, dw = log(gw / aw); the standard parameterization.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("encode: degenerate anchor")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gcx = gt[:, 0] + 0.5 * gw
    gcy = gt[:, 1] + 0.5 * gh
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah,
                     np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of encode; decode(encode(g, a), a) == g up to float error."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("decode: degenerate anchor")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = offsets[:, 0] * aw + acx
    cy = offsets[:, 1] * ah + acy
    w = np.exp(offsets[:, 2]) * aw
    h = np.exp(offsets[:, 3]) * ah
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_boxes(boxes: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    out = np.asarray(boxes, dtype=np.float64).copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, h)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy descending-score suppression; ties keep the lower index.

    Returns kept indices into the input arrays, in keep order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError(f"nms: {boxes.shape[0]} boxes vs {scores.shape[0]} scores")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    # stable sort on -score => equal scores stay in original index order
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        ix = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        iy = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return np.asarray(keep, dtype=np.intp)


# ---------------------------------------------------------------------------
# ROI pooling (differentiable)
# ---------------------------------------------------------------------------


def _bin_edges(lo: int, hi: int, pooled: int) -> list[tuple[int, int]]:
    """Integer bin boundaries over [lo, hi); empty bins snap to the nearest cell."""
    extent = hi - lo
    edges = []
    for i in range(pooled):
        a = lo + int(np.floor(i * extent / pooled))
        b = lo + int(np.ceil((i + 1) * extent / pooled))
        if b <= a:  # quantization collapsed the bin
            a = min(max(a, lo), hi - 1)
            b = a + 1
        edges.append((a, b))
    return edges


def roi_pool(features: T.Tensor, rois: np.ndarray, spatial_scale: float,
             pooled: int = 4) -> T.Tensor:
    """Max-pool each ROI into a pooled x pooled grid (original ROI-Pool).

    features: (1, C, H, W) tensor; rois: (R, 4) boxes in image pixels.
    Returns (R, C, pooled, pooled).  The backward pass routes each output
    cell's gradient to its argmax position in the feature map.
    """
    if features.ndim != 4 or features.shape[0] != 1:
        raise T.ShapeError(f"roi_pool: expected (1,C,H,W) features, got {features.shape}")
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    _, c, h, w = features.shape
    r = rois.shape[0]
    fmap = features.data[0]
    out = np.empty((r, c, pooled, pooled), dtype=features.data.dtype)
    argmax = np.empty((r, c, pooled, pooled), dtype=np.intp)  # flat h*w index

    for k, (x1, y1, x2, y2) in enumerate(rois):
        if x2 * spatial_scale <= 0 or y2 * spatial_scale <= 0 or \
           x1 * spatial_scale >= w or y1 * spatial_scale >= h:
            raise ValueError(f"roi_pool: roi {rois[k]} outside feature extent")
        cx1 = int(np.floor(x1 * spatial_scale))
        cy1 = int(np.floor(y1 * spatial_scale))
        cx2 = int(np.ceil(x2 * spatial_scale))
        cy2 = int(np.ceil(y2 * spatial_scale))
        cx1 = min(max(cx1, 0), w - 1)
        cy1 = min(max(cy1, 0), h - 1)
        cx2 = min(max(cx2, cx1 + 1), w)
        cy2 = min(max(cy2, cy1 + 1), h)
        ybins = _bin_edges(cy1, cy2, pooled)
        xbins = _bin_edges(cx1, cx2, pooled)
        for i, (ya, yb) in enumerate(ybins):
            for j, (xa, xb) in enumerate(xbins):
                patch = fmap[:, ya:yb, xa:xb].reshape(c, -1)
                idx = patch.argmax(axis=1)
                out[k, :, i, j] = patch[np.arange(c), idx]
                py, px = np.unravel_index(idx, (yb - ya, xb - xa))
                argmax[k, :, i, j] = (ya + py) * w + (xa + px)

    result = T.Tensor(out)

    def bwd(g):
        gf = np.zeros((c, h * w), dtype=features.data.dtype)
        np.add.at(gf, (np.arange(c)[None, :, None, None], argmax),
                  g)
        T.accumulate_grad(features, gf.reshape(1, c, h, w))

    return T.record(result, (features,), bwd)
