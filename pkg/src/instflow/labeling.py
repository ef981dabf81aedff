"""Per-track class labels from accumulated soft evidence, and instance confidence scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IdentityMap, InstanceRecord, ScalarMap, SemanticProbMap, require_same_shape
from .errors import MissingInstanceError


@dataclass(frozen=True)
class TrackLabel:
    global_id: int
    class_index: int
    label_confidence: float

    def __post_init__(self):
        if self.class_index < 1:
            raise ValueError("a track label cannot be background")


def class_evidence(probs: np.ndarray, pixels: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Mean class-probability vector of every instance, shape ``(M + 1, K)``; row 0 unused.

    ``pixels`` holds the instances' flat pixel indices grouped by local id,
    instance ``m`` starting at ``starts[m - 1]`` with ``counts[m - 1]`` pixels.
    """
    k = probs.shape[0]
    flat = probs.reshape(k, -1)
    out = np.zeros((len(counts) + 1, k))
    if len(counts):
        for c in range(k):
            out[1:, c] = np.add.reduceat(flat[c][pixels], starts)
        out[1:] /= np.asarray(counts, dtype=np.float64)[:, None]
    return out


def frame_class_evidence(sem: SemanticProbMap, ids: IdentityMap, m: int) -> np.ndarray:
    """Mean per-pixel class probability vector over instance ``m``."""
    require_same_shape(sem, ids)
    pixels = np.flatnonzero(ids.ids.ravel() == m)
    if m == 0 or pixels.size == 0:
        raise MissingInstanceError(f"instance {m} is not present in the identity map")
    return class_evidence(sem.probs, pixels, [0], [pixels.size])[1]


def hard_label(evidence: np.ndarray) -> tuple[int, float]:
    """Winning non-background class and its share of the total evidence mass."""
    evidence = np.asarray(evidence, dtype=np.float64)
    cls = int(np.argmax(evidence[1:])) + 1
    total = float(evidence.sum())
    return cls, (float(evidence[cls]) / total if total > 0 else 0.0)


def finalize_labels(state) -> list[TrackLabel]:
    """Harden the accumulated evidence of every track into one class.

    ``state`` is a TrackerState (or anything with ``track_accumulators``).
    Ties between classes go to the smaller index; background never wins.
    """
    labels = []
    for g in sorted(state.track_accumulators):
        cls, conf = hard_label(state.track_accumulators[g])
        labels.append(TrackLabel(g, cls, conf))
    return labels


def combine_score(semantic_score: float, center_score: float) -> float:
    return semantic_score * center_score


def instance_score(
    sem: SemanticProbMap,
    heatmap: ScalarMap,
    ids: IdentityMap,
    record: InstanceRecord,
    class_index: int | None = None,
) -> float:
    """Semantic confidence times center confidence for one instance.

    The semantic part is the mean probability of ``class_index`` over the
    instance; the center part is the heatmap value at the instance center.
    Without ``class_index`` the instance's own best non-background class is used.
    """
    evidence = frame_class_evidence(sem, ids, record.local_id)
    if class_index is None:
        class_index, _ = hard_label(evidence)
    r, c = int(round(record.center[0])), int(round(record.center[1]))
    return combine_score(float(evidence[class_index]), float(heatmap.values[r, c]))
