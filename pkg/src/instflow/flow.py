"""Instance flow: per-instance center-to-center motion towards a reference frame.

The main estimator averages the offset residual ``inter - intra`` over each
instance's pixels. Under exact predictions the residual is the constant
``reference_center - target_center``, so the mean does not depend on which
part of the instance mask survived segmentation. Two weaker estimators are
kept for comparison: averaging the inter-frame offset alone, and propagating
identities by mask overlap with the previous frame.
"""

from __future__ import annotations

import numpy as np

from .core import IdentityMap, InstanceFlow, OffsetField, require_same_shape
from .errors import MissingInstanceError

FLOW_METHODS = ("residual", "avg", "iou")
IOU_MATCH_THRESHOLD = 0.5


class InstanceSamples:
    """Pixels entering the flow means, grouped by instance.

    ``pixels`` must list each instance's pixels contiguously, instances in
    ascending local-id order (``1..M``), row-major within an instance.
    ``stride`` keeps every ``stride``-th pixel of each instance, starting with
    its first. Per-instance sums run over contiguous runs in that fixed
    order, so they are reproducible bit for bit.
    """

    def __init__(self, pixels: np.ndarray, starts: np.ndarray, counts: np.ndarray, stride: int = 1):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        pixels = np.asarray(pixels, dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        starts = np.asarray(starts, dtype=np.int64)
        if stride > 1 and pixels.size:
            rank = np.arange(pixels.size) - np.repeat(starts, counts)
            pixels = pixels[rank % stride == 0]
            counts = -(-counts // stride)
            starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        self.pixels = pixels
        self.starts = starts
        self.support = counts
        self._intra: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def num_instances(self) -> int:
        return int(self.support.size)

    def _sums(self, values: np.ndarray) -> np.ndarray:
        if self.pixels.size == 0:
            return np.zeros(0)
        return np.add.reduceat(values, self.starts)

    def _gather(self, field: OffsetField) -> tuple[np.ndarray, np.ndarray]:
        return field.d_row.ravel()[self.pixels], field.d_col.ravel()[self.pixels]

    def _flows(self, sum_r, sum_c, reference_index: int) -> dict[int, InstanceFlow]:
        mean_r = sum_r / self.support
        mean_c = sum_c / self.support
        return {
            m + 1: InstanceFlow(m + 1, reference_index, (float(mean_r[m]), float(mean_c[m])), int(self.support[m]))
            for m in range(self.num_instances)
        }

    def cache_intra(self, intra: OffsetField) -> None:
        """Gather the intra offsets once; call before sharing the object across threads."""
        self._intra = self._gather(intra)

    def residual(self, intra: OffsetField, inter: OffsetField, reference_index: int) -> dict[int, InstanceFlow]:
        """Mean ``inter - intra`` per instance; the intra gather is cached across references."""
        if self._intra is None:
            self.cache_intra(intra)
        ir, ic = self._intra
        er, ec = self._gather(inter)
        return self._flows(self._sums(er - ir), self._sums(ec - ic), reference_index)

    def average(self, inter: OffsetField, reference_index: int) -> dict[int, InstanceFlow]:
        """Mean inter offset per instance."""
        er, ec = self._gather(inter)
        return self._flows(self._sums(er), self._sums(ec), reference_index)


def _instance_pixels(ids: IdentityMap, m: int) -> np.ndarray:
    pixels = np.flatnonzero(ids.ids.ravel() == m)
    if m == 0 or pixels.size == 0:
        raise MissingInstanceError(f"instance {m} is not present in the identity map")
    return pixels


def instance_flow(
    ids: IdentityMap,
    intra: OffsetField,
    inter: OffsetField,
    m: int,
    stride: int = 1,
    reference_index: int = 0,
) -> InstanceFlow:
    """Mean offset residual ``inter(p) - intra(p)`` over instance ``m``.

    With ``stride > 1`` only every ``stride``-th pixel of the instance (row-major,
    first pixel always included) enters the mean.
    """
    require_same_shape(ids, intra, inter)
    pixels = _instance_pixels(ids, m)
    flow = InstanceSamples(pixels, [0], [pixels.size], stride).residual(intra, inter, reference_index)[1]
    return InstanceFlow(m, reference_index, flow.vector, flow.support)


def flow_avg_baseline(
    ids: IdentityMap,
    inter: OffsetField,
    m: int,
    reference_index: int = 0,
) -> InstanceFlow:
    """Flow from the inter-frame offset alone.

    Equals the mean pointed-to reference center minus the barycenter of the
    instance mask. It matches :func:`instance_flow` only when the mask is
    complete; a partial mask shifts the barycenter and biases the result.
    """
    require_same_shape(ids, inter)
    pixels = _instance_pixels(ids, m)
    flow = InstanceSamples(pixels, [0], [pixels.size]).average(inter, reference_index)[1]
    return InstanceFlow(m, reference_index, flow.vector, flow.support)


def iou_propagation_match(
    ids_target: IdentityMap,
    inter: OffsetField,
    ids_reference: IdentityMap,
) -> dict[int, int | None]:
    """Match target instances to reference ids by single-frame mask propagation.

    Each target pixel looks up the reference id at its rounded warped
    coordinate. Since inter offsets point at reference centers, the warp
    regroups target pixels by reference instance: the pixels voting for
    reference id ``n`` form the propagated mask of ``n`` in target
    coordinates. Target ``m`` takes the ``n`` whose propagated mask has the
    highest IoU with ``m`` (ties to the smaller id). Targets whose best IoU is
    below 0.5, or with no foreground votes, map to ``None``.
    """
    height, width = require_same_shape(ids_target, inter, ids_reference)
    flat_ids = ids_target.ids.ravel()
    pixels = np.flatnonzero(flat_ids)
    targets = flat_ids[pixels].astype(np.int64)
    result: dict[int, int | None] = {int(m): None for m in np.unique(targets)}
    if pixels.size == 0:
        return result

    rows, cols = np.divmod(pixels, width)
    wr = np.rint(rows + inter.d_row.ravel()[pixels])
    wc = np.rint(cols + inter.d_col.ravel()[pixels])
    inside = (wr >= 0) & (wr < height) & (wc >= 0) & (wc < width)
    votes = np.zeros(pixels.size, dtype=np.int64)
    votes[inside] = ids_reference.ids[wr[inside].astype(np.int64), wc[inside].astype(np.int64)]

    area_t = dict(zip(*[a.tolist() for a in np.unique(targets, return_counts=True)]))
    voted = votes > 0
    if not voted.any():
        return result
    ref_ids, area_v = np.unique(votes[voted], return_counts=True)
    area_v = dict(zip(ref_ids.tolist(), area_v.tolist()))
    pairs, overlap = np.unique(np.stack([targets[voted], votes[voted]], axis=1), axis=0, return_counts=True)

    best: dict[int, tuple[int, int, int]] = {}
    for (m, n), inter_count in zip(pairs.tolist(), overlap.tolist()):
        union = area_t[m] + area_v[n] - inter_count
        prev = best.get(m)
        # exact rational comparison; pairs arrive with ascending n, so ties keep the smaller id
        if prev is None or inter_count * prev[2] > prev[1] * union:
            best[m] = (n, inter_count, union)
    for m, (n, inter_count, union) in best.items():
        if 2 * inter_count >= union:
            result[int(m)] = int(n)
    return result
