"""Region proposals on heightmaps: foreground components filtered by area."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cloudcore import Heightmap

PATCH = 28
DEFAULT_FG_THRESHOLD = 250
DEFAULT_MIN_AREA = 30
MARGIN = 2

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class Region:
    cells: np.ndarray  # (k, 2) row/col indices
    bbox: tuple  # (row, col, height, width)

    @property
    def area(self) -> int:
        return len(self.cells)


@dataclass(frozen=True, eq=False)
class Roi:
    bbox: tuple  # (row, col, height, width), margin included
    area: int
    patch: np.ndarray  # (28, 28) uint8

    def to_json(self) -> dict:
        return {"bbox": [int(v) for v in self.bbox], "area": int(self.area)}


def _cells(map_or_cells) -> np.ndarray:
    return map_or_cells.cells if isinstance(map_or_cells, Heightmap) else np.asarray(map_or_cells)


def connected_components(hmap, fg_threshold: int = DEFAULT_FG_THRESHOLD) -> list[Region]:
    """8-connected components of cells with value ``< fg_threshold``, in scan order."""
    cells = _cells(hmap)
    labels, n = ndimage.label(cells < fg_threshold, structure=_EIGHT)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    rows, cols, lab = rows[order], cols[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    regions = []
    for r, c in zip(np.split(rows, splits), np.split(cols, splits)):
        r0, c0 = int(r.min()), int(c.min())
        bbox = (r0, c0, int(r.max()) - r0 + 1, int(c.max()) - c0 + 1)
        regions.append(Region(np.stack([r, c], axis=1), bbox))
    return regions


def expand_bbox(bbox, shape, margin: int = MARGIN) -> tuple:
    r, c, h, w = bbox
    r0, c0 = max(0, r - margin), max(0, c - margin)
    r1, c1 = min(shape[0], r + h + margin), min(shape[1], c + w + margin)
    return (r0, c0, r1 - r0, c1 - c0)


def crop_patch(hmap, bbox, size: int = PATCH) -> np.ndarray:
    """Crop ``bbox`` and resample to ``size x size`` by nearest neighbour."""
    cells = _cells(hmap)
    r, c, h, w = bbox
    crop = cells[r:r + h, c:c + w]
    ri = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    ci = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return crop[np.ix_(ri, ci)].astype(np.uint8)


def propose_rois(
    hmap, fg_threshold: int = DEFAULT_FG_THRESHOLD, min_area: int = DEFAULT_MIN_AREA
) -> list[Roi]:
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    cells = _cells(hmap)
    rois = []
    for reg in connected_components(cells, fg_threshold):
        if reg.area < min_area:
            continue
        box = expand_bbox(reg.bbox, cells.shape)
        rois.append(Roi(box, reg.area, crop_patch(cells, box)))
    rois.sort(key=lambda roi: -roi.area)
    return rois


def bbox_iou(a, b) -> float:
    ar, ac, ah, aw = a
    br, bc, bh, bw = b
    ih = max(0, min(ar + ah, br + bh) - max(ar, br))
    iw = max(0, min(ac + aw, bc + bw) - max(ac, bc))
    inter = ih * iw
    union = ah * aw + bh * bw - inter
    return inter / union if union else 0.0
