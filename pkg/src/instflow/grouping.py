"""Intra-frame instance grouping: heatmap NMS and nearest-warped-center assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import (
    FramePrediction,
    IdentityMap,
    InstanceRecord,
    OffsetField,
    ScalarMap,
    foreground_mask,
    require_same_shape,
)
from .errors import DimensionError
from .parallel import SERIAL, Workers, chunk_bounds, concat_ordered

DEFAULT_NMS_WINDOW = 41
DEFAULT_CENTER_THRESHOLD = 0.15

# pixels per assignment work item; fixed so results never depend on worker count
_ASSIGN_CHUNK = 1 << 16
# coarse cell size of the nearest-center lookup and the margin that makes a cell unambiguous
_CELL = 8
_CELL_MARGIN = 1e-6


@dataclass(frozen=True)
class GroupingParams:
    nms_window: int = DEFAULT_NMS_WINDOW
    center_threshold: float = DEFAULT_CENTER_THRESHOLD

    def __post_init__(self):
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ValueError(f"nms_window must be odd and >= 1, got {self.nms_window}")
        if not 0.0 <= self.center_threshold <= 1.0:
            raise ValueError(f"center_threshold must lie in [0, 1], got {self.center_threshold}")


@dataclass(frozen=True)
class Center:
    position: tuple[int, int]
    peak_value: float


@dataclass
class Segmentation:
    """Grouping output plus the flat pixel indices later stages reuse.

    ``pixels`` lists every labelled pixel grouped by local id (ascending) and
    row-major within each instance; instance ``m`` occupies
    ``pixels[starts[m - 1]:starts[m - 1] + counts[m - 1]]``. ``labels`` holds
    the matching local ids.
    """

    ids: IdentityMap
    records: list[InstanceRecord]
    pixels: np.ndarray
    labels: np.ndarray
    starts: np.ndarray
    counts: np.ndarray

    @property
    def num_instances(self) -> int:
        return len(self.records)


def _candidate_clusters(rows: np.ndarray, cols: np.ndarray, shape, half: int):
    """Group candidate pixels into boxes that contain every candidate's NMS window."""
    height, width = shape
    cell = max(half, 16)
    grid = np.zeros((-(-height // cell), -(-width // cell)), dtype=bool)
    cr, cc = rows // cell, cols // cell
    grid[cr, cc] = True
    grid = ndimage.binary_dilation(grid, structure=np.ones((3, 3), dtype=bool))
    labels, _ = ndimage.label(grid, structure=np.ones((3, 3), dtype=int))
    member = labels[cr, cc]
    boxes = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        sel = np.flatnonzero(member == k)
        if sel.size == 0:
            continue
        box = (
            sl[0].start * cell,
            min(sl[0].stop * cell, height),
            sl[1].start * cell,
            min(sl[1].stop * cell, width),
        )
        boxes.append((box, sel))
    return boxes


def _local_maxima(values: np.ndarray, fg: np.ndarray, threshold: float, window: int, rows, cols, box, sel):
    r0, r1, c0, c1 = box
    crop = values[r0:r1, c0:c1]
    masked = np.where(fg[r0:r1, c0:c1] & (crop >= threshold), crop, -np.inf)
    pooled = ndimage.maximum_filter(masked, size=window, mode="constant", cval=-np.inf)
    lr, lc = rows[sel] - r0, cols[sel] - c0
    return sel[pooled[lr, lc] == masked[lr, lc]]


def _break_plateaus(flat: np.ndarray, vals: np.ndarray, rows, cols, half: int) -> np.ndarray:
    """Drop every maximum that has an equal-valued maximum earlier in raster order within its window."""
    keep = np.ones(flat.size, dtype=bool)
    if half == 0 or flat.size < 2:
        return keep
    uniq, inverse, counts = np.unique(vals, return_inverse=True, return_counts=True)
    for g in np.flatnonzero(counts > 1):
        members = np.flatnonzero(inverse == g)
        pts = np.stack([rows[members], cols[members]], axis=1)
        pairs = cKDTree(pts).query_pairs(r=half, p=np.inf, output_type="ndarray")
        if pairs.size == 0:
            continue
        a, b = members[pairs[:, 0]], members[pairs[:, 1]]
        later = np.where(flat[a] > flat[b], a, b)
        keep[later] = False
    return keep


def extract_centers(
    heatmap: ScalarMap,
    fg: np.ndarray,
    params: GroupingParams = GroupingParams(),
    workers: Workers = SERIAL,
    fg_pixels: np.ndarray | None = None,
) -> list[Center]:
    """Find instance centers by windowed non-maximum suppression on the heatmap.

    Background pixels are removed from the heatmap first. A pixel is a center
    when it is foreground, reaches ``center_threshold`` and equals the maximum
    of the foreground heatmap over its ``nms_window`` neighborhood (clipped at
    the borders). Among equal maxima sharing a window only the first in raster
    order survives.

    ``fg_pixels`` may pass ``np.flatnonzero(fg)`` when the caller has it already.

    Returns:
        Centers sorted by descending peak value, ties by ``(row, col)``.
    """
    fg = np.asarray(fg, dtype=bool)
    if fg.shape != heatmap.shape:
        raise DimensionError(f"foreground {fg.shape} does not match heatmap {heatmap.shape}")
    values = heatmap.values
    if fg_pixels is None:
        fg_pixels = np.flatnonzero(fg)
    # values below the threshold can never beat a candidate, so they are masked too
    flat = fg_pixels[values.ravel()[fg_pixels] >= params.center_threshold]
    if flat.size == 0:
        return []
    width = heatmap.width
    rows, cols = np.divmod(flat, width)
    half = params.nms_window // 2

    boxes = _candidate_clusters(rows, cols, heatmap.shape, half)
    kept = workers.map(
        lambda item: _local_maxima(values, fg, params.center_threshold, params.nms_window, rows, cols, *item), boxes
    )
    sel = np.sort(concat_ordered(kept))
    flat, rows, cols = flat[sel], rows[sel], cols[sel]
    vals = values.ravel()[flat]

    keep = _break_plateaus(flat, vals, rows, cols, half)
    flat, rows, cols, vals = flat[keep], rows[keep], cols[keep], vals[keep]

    order = np.lexsort((flat, -vals))
    return [Center((int(rows[i]), int(cols[i])), float(vals[i])) for i in order]


def _assign_chunk(wr: np.ndarray, wc: np.ndarray, crow: np.ndarray, ccol: np.ndarray) -> np.ndarray:
    dr = wr - crow[0]
    dc = wc - ccol[0]
    best = dr * dr + dc * dc
    label = np.ones(wr.shape, dtype=np.uint32)
    for m in range(1, crow.size):
        dr = wr - crow[m]
        dc = wc - ccol[m]
        d = dr * dr + dc * dc
        closer = d < best
        best = np.where(closer, d, best)
        label[closer] = m + 1
    return label


def _cell_lookup(crow: np.ndarray, ccol: np.ndarray, shape):
    """Nearest center per coarse cell, 0 where the cell is not provably owned by one center.

    ``d_k - d_l`` (squared distances) is affine in the query point, so if every
    corner of a cell has the same nearest center ``l`` and beats all others by
    more than the margin, so does every point inside the cell.
    """
    height, width = shape
    r0, c0 = -float(_CELL), -float(_CELL)
    nr = -(-(height + 2 * _CELL) // _CELL)
    nc = -(-(width + 2 * _CELL) // _CELL)
    gr = r0 + _CELL * np.arange(nr + 1, dtype=np.float64)
    gc = c0 + _CELL * np.arange(nc + 1, dtype=np.float64)
    dr = gr[:, None, None] - crow[None, None, :]
    dc = gc[None, :, None] - ccol[None, None, :]
    d = dr * dr + dc * dc
    best = np.argmin(d, axis=2)
    part = np.partition(d, 1, axis=2)
    ok = part[..., 1] - part[..., 0] > _CELL_MARGIN
    label = np.where(ok, best + 1, 0)
    same = (label[:-1, :-1] == label[1:, :-1]) & (label[:-1, :-1] == label[:-1, 1:]) & (label[:-1, :-1] == label[1:, 1:])
    cells = np.where(same, label[:-1, :-1], 0).astype(np.uint32)
    return cells, r0, c0


def _lookup(wr: np.ndarray, wc: np.ndarray, cells: np.ndarray, r0: float, c0: float) -> np.ndarray:
    ci = np.floor((wr - r0) * (1.0 / _CELL))
    cj = np.floor((wc - c0) * (1.0 / _CELL))
    inside = (ci >= 0) & (ci < cells.shape[0]) & (cj >= 0) & (cj < cells.shape[1])
    out = np.zeros(wr.shape, dtype=np.uint32)
    if inside.all():
        out[:] = cells[ci.astype(np.intp), cj.astype(np.intp)]
    else:
        out[inside] = cells[ci[inside].astype(np.intp), cj[inside].astype(np.intp)]
    return out


def assign_pixels(
    pixels: np.ndarray,
    centers: list[Center],
    intra_offset: OffsetField,
    workers: Workers = SERIAL,
) -> np.ndarray:
    """Local ids (1-based, center order) for the given flat pixel indices.

    Distances are compared as squared Euclidean norms, which preserves the
    argmin; ties go to the earliest center. Pixels whose warped coordinate
    falls in a coarse cell owned by a single center take that center
    directly; the rest are scanned against every center.
    """
    if not centers:
        return np.zeros(pixels.size, dtype=np.uint32)
    width = intra_offset.shape[1]
    rows, cols = np.divmod(pixels, width)
    wr = rows + intra_offset.d_row.ravel()[pixels]
    wc = cols + intra_offset.d_col.ravel()[pixels]
    crow = np.array([c.position[0] for c in centers], dtype=np.float64)
    ccol = np.array([c.position[1] for c in centers], dtype=np.float64)
    if crow.size == 1:
        return np.ones(pixels.size, dtype=np.uint32)
    if pixels.size == 0:
        return np.zeros(0, dtype=np.uint32)
    cells, r0, c0 = _cell_lookup(crow, ccol, intra_offset.shape)
    parts = workers.map(
        lambda b: _lookup(wr[b[0]:b[1]], wc[b[0]:b[1]], cells, r0, c0),
        chunk_bounds(pixels.size, _ASSIGN_CHUNK),
    )
    labels = concat_ordered(parts)
    hard = np.flatnonzero(labels == 0)
    if hard.size:
        parts = workers.map(
            lambda b: _assign_chunk(wr[hard[b[0]:b[1]]], wc[hard[b[0]:b[1]]], crow, ccol),
            chunk_bounds(hard.size, _ASSIGN_CHUNK),
        )
        labels[hard] = concat_ordered(parts)
    return labels


def group_pixels(
    centers: list[Center],
    intra_offset: OffsetField,
    fg: np.ndarray,
    workers: Workers = SERIAL,
) -> IdentityMap:
    """Assign every foreground pixel to the center nearest its warped coordinate."""
    fg = np.asarray(fg, dtype=bool)
    if fg.shape != intra_offset.shape:
        raise DimensionError(f"foreground {fg.shape} does not match offsets {intra_offset.shape}")
    ids = np.zeros(fg.size, dtype=np.uint32)
    if centers:
        pixels = np.flatnonzero(fg)
        ids[pixels] = assign_pixels(pixels, centers, intra_offset, workers)
    return IdentityMap(ids.reshape(fg.shape))


def segment(
    pred: FramePrediction,
    params: GroupingParams = GroupingParams(),
    workers: Workers = SERIAL,
) -> Segmentation:
    """Run foreground masking, center extraction and pixel grouping on one frame.

    Centers that end up owning no pixel are dropped and the remaining ids are
    renumbered to ``1..M`` in center order.
    """
    require_same_shape(pred.semantic, pred.heatmap, pred.intra_offset)
    height, width = pred.shape
    fg = foreground_mask(pred.semantic)
    pixels = np.flatnonzero(fg)
    centers = extract_centers(pred.heatmap, fg, params, workers, pixels)
    if not centers:
        empty = np.zeros(0, dtype=np.int64)
        return Segmentation(IdentityMap.empty(height, width), [], empty, empty.astype(np.uint32), empty, empty)

    labels = assign_pixels(pixels, centers, pred.intra_offset, workers)
    counts = np.bincount(labels, minlength=len(centers) + 1)
    present = np.flatnonzero(counts[1:]) + 1
    if present.size != len(centers):
        remap = np.zeros(len(centers) + 1, dtype=np.uint32)
        remap[present] = np.arange(1, present.size + 1, dtype=np.uint32)
        labels = remap[labels]

    ids = np.zeros(height * width, dtype=np.uint32)
    ids[pixels] = labels
    records = []
    for new_id, old_id in enumerate(present, start=1):
        c = centers[old_id - 1]
        records.append(
            InstanceRecord(
                local_id=new_id,
                center=(float(c.position[0]), float(c.position[1])),
                pixel_count=int(counts[old_id]),
                peak_value=c.peak_value,
                frame_index=pred.index,
            )
        )
    order = np.argsort(labels, kind="stable")
    sizes = counts[present]
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
    return Segmentation(IdentityMap(ids.reshape(height, width)), records, pixels[order], labels[order], starts, sizes)


def segment_frame(
    pred: FramePrediction,
    params: GroupingParams = GroupingParams(),
    workers: Workers = SERIAL,
) -> tuple[IdentityMap, list[InstanceRecord]]:
    seg = segment(pred, params, workers)
    return seg.ids, seg.records
