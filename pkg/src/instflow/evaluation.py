"""Video instance segmentation metrics: track IoU, AP/AR over IoU thresholds, identity switches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import IdentityMap

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
METRIC_NAMES = ("AP", "AP50", "AP75", "AR1", "AR10")


@dataclass
class Track:
    """One track; ``masks`` maps frame index to sorted flat pixel indices."""

    global_id: int
    class_index: int
    score: float = 1.0
    masks: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.masks = {int(t): np.unique(np.asarray(m, dtype=np.int64)) for t, m in self.masks.items()}
        if not self.masks:
            raise ValueError(f"track {self.global_id} has no masks")
        if not np.isfinite(self.score):
            raise ValueError("track score must be finite")

    def area(self, t: int) -> int:
        m = self.masks.get(t)
        return 0 if m is None else int(m.size)


def tracks_from_identity_maps(
    maps: Sequence[IdentityMap | np.ndarray],
    classes: dict[int, int],
    scores: dict[int, float] | None = None,
) -> list[Track]:
    """Collect per-frame identity maps into tracks, one per nonzero id.

    Ids missing from ``classes`` are skipped; missing scores default to 1.
    """
    masks: dict[int, dict[int, np.ndarray]] = {}
    for t, m in enumerate(maps):
        flat = (m.ids if isinstance(m, IdentityMap) else np.asarray(m)).ravel()
        pixels = np.flatnonzero(flat)
        if pixels.size == 0:
            continue
        vals = flat[pixels]
        order = np.argsort(vals, kind="stable")
        vals, pixels = vals[order], pixels[order]
        uniq, starts = np.unique(vals, return_index=True)
        for g, part in zip(uniq.tolist(), np.split(pixels, starts[1:])):
            masks.setdefault(g, {})[t] = part
    scores = scores or {}
    return [
        Track(g, classes[g], float(scores.get(g, 1.0)), masks[g]) for g in sorted(masks) if g in classes
    ]


def st_iou(a: Track, b: Track, num_frames: int | None = None) -> float:
    """Summed per-frame intersections over summed per-frame unions; 0 when both are empty."""
    frames = set(a.masks) | set(b.masks)
    if num_frames is not None:
        frames = {t for t in frames if t < num_frames}
    inter = union = 0
    for t in frames:
        ma, mb = a.masks.get(t), b.masks.get(t)
        if ma is None or mb is None:
            union += (0 if ma is None else ma.size) + (0 if mb is None else mb.size)
            continue
        i = np.intersect1d(ma, mb, assume_unique=True).size
        inter += i
        union += ma.size + mb.size - i
    return inter / union if union else 0.0


def iou_matrix(preds: Sequence[Track], gts: Sequence[Track]) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.class_index == g.class_index:
                out[i, j] = st_iou(p, g)
    return out


def _score_order(preds: Sequence[Track]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].global_id))


def _greedy_tp(ious: np.ndarray, threshold: float) -> np.ndarray:
    """TP flags for predictions already in score order; each takes its best unmatched gt."""
    tp = np.zeros(ious.shape[0], dtype=bool)
    taken = np.zeros(ious.shape[1], dtype=bool)
    for i in range(ious.shape[0]):
        cand = np.where(taken | (ious[i] < threshold), -1.0, ious[i])
        if cand.size and cand.max() >= 0:
            j = int(np.argmax(cand))
            taken[j] = True
            tp[i] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve of score-ordered TP flags."""
    if num_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < tp.size, precision[np.minimum(idx, tp.size - 1)], 0.0)
    return float(interp.mean())


@dataclass
class _ClassVideo:
    scores: np.ndarray
    ids: np.ndarray
    ious: np.ndarray
    num_gt: int


def evaluate_videos(
    videos: Iterable[tuple[Sequence[Track], Sequence[Track]]],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: Sequence[int] = (1, 10),
) -> dict[str, float]:
    """AP and AR pooled over several videos given as ``(pred_tracks, gt_tracks)`` pairs.

    Predictions are matched within their own video and class; the
    precision-recall curve of each class pools all videos. Classes without
    ground truth are skipped. ARk keeps the k best-scoring predictions of
    each video (over all classes) and averages recall over thresholds and
    classes.
    """
    thresholds = tuple(float(t) for t in thresholds)
    per_class: dict[int, list[_ClassVideo]] = {}
    for preds, gts in videos:
        preds = [preds[i] for i in _score_order(preds)]
        rank = {id(p): r for r, p in enumerate(preds)}
        classes = {g.class_index for g in gts}
        for c in classes:
            cp = [p for p in preds if p.class_index == c]
            cg = sorted((g for g in gts if g.class_index == c), key=lambda g: g.global_id)
            per_class.setdefault(c, []).append(
                _ClassVideo(
                    np.array([p.score for p in cp]),
                    np.array([rank[id(p)] for p in cp], dtype=np.int64),
                    iou_matrix(cp, cg).reshape(len(cp), len(cg)),
                    len(cg),
                )
            )
    metrics = {name: 0.0 for name in METRIC_NAMES}
    if not per_class:
        return metrics

    ap = np.zeros((len(per_class), len(thresholds)))
    ar = {k: np.zeros((len(per_class), len(thresholds))) for k in max_dets}
    for ci, c in enumerate(sorted(per_class)):
        entries = per_class[c]
        num_gt = sum(e.num_gt for e in entries)
        for ti, thr in enumerate(thresholds):
            flags = [_greedy_tp(e.ious, thr) for e in entries]
            scores = np.concatenate([e.scores for e in entries])
            video = np.concatenate([np.full(e.scores.size, v) for v, e in enumerate(entries)])
            ranks = np.concatenate([e.ids for e in entries])
            order = np.lexsort((ranks, video, -scores))
            ap[ci, ti] = interpolated_ap(np.concatenate(flags)[order], num_gt)
            for k in max_dets:
                hits = sum(int(f[e.ids < k].sum()) for f, e in zip(flags, entries))
                ar[k][ci, ti] = hits / num_gt
    metrics["AP"] = float(ap.mean())
    for name, thr in (("AP50", 0.5), ("AP75", 0.75)):
        if thr in thresholds:
            metrics[name] = float(ap[:, thresholds.index(thr)].mean())
    for k in max_dets:
        metrics[f"AR{k}"] = float(ar[k].mean())
    return metrics


def average_precision(
    pred_tracks: Sequence[Track],
    gt_tracks: Sequence[Track],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> dict[str, float]:
    """AP, AP50, AP75, AR1 and AR10 for one video."""
    return evaluate_videos([(pred_tracks, gt_tracks)], thresholds)


def _majority_ids(gt: Track, preds: Sequence[Track]) -> list[int | None]:
    out = []
    for t in sorted(gt.masks):
        best, best_count = None, 0
        for p in sorted(preds, key=lambda p: p.global_id):
            m = p.masks.get(t)
            if m is None:
                continue
            n = np.intersect1d(gt.masks[t], m, assume_unique=True).size
            if n > best_count:
                best, best_count = p.global_id, n
        out.append(best)
    return out


def identity_switches(pred_tracks: Sequence[Track], gt_tracks: Sequence[Track]) -> int:
    """Changes of the majority-overlap predicted id along each ground-truth track.

    Frames where no prediction overlaps the ground truth are skipped rather
    than counted as changes.
    """
    total = 0
    for gt in gt_tracks:
        seq = [g for g in _majority_ids(gt, pred_tracks) if g is not None]
        total += sum(1 for a, b in zip(seq, seq[1:]) if a != b)
    return total


def identity_switches_from_maps(pred_maps: Sequence[IdentityMap], gt_maps: Sequence[IdentityMap]) -> int:
    """Same count as :func:`identity_switches`, computed straight from identity maps."""
    last: dict[int, int] = {}
    total = 0
    for pm, gm in zip(pred_maps, gt_maps):
        g = gm.ids.ravel().astype(np.int64)
        p = pm.ids.ravel().astype(np.int64)
        fg = g > 0
        if not fg.any():
            continue
        pairs, counts = np.unique(np.stack([g[fg], p[fg]], axis=1), axis=0, return_counts=True)
        best: dict[int, tuple[int, int]] = {}
        for (gid, pid), n in zip(pairs.tolist(), counts.tolist()):
            if pid == 0:
                continue
            # pairs are sorted by pid within gid, so strict > keeps the smaller id on ties
            if gid not in best or n > best[gid][1]:
                best[gid] = (pid, n)
        for gid, (pid, _) in best.items():
            if gid in last and last[gid] != pid:
                total += 1
            last[gid] = pid
    return total
