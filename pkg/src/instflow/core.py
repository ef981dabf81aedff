"""Dense-grid domain types and the primitive map operations shared by all stages.

Coordinates are ``(row, col)`` with the origin at the center of the top-left
pixel. Offsets point from a pixel to the center it belongs to, so
``pixel + offset == center``.

All types wrap read-only numpy arrays and are safe to share between worker
threads. Per-channel data is stored channel-major (``(K, H, W)`` for class
probabilities, two ``(H, W)`` planes for offsets) so that per-class and
per-component operations touch contiguous memory; use the ``from_hwc``
constructors for channel-innermost arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import BoundsError, DimensionError

PROB_SUM_TOL = 1e-5


def _frozen(values, dtype) -> np.ndarray:
    # zero-copy when the input already has the right dtype and layout; the
    # caller must then leave its own buffer alone
    arr = np.ascontiguousarray(values, dtype=dtype).view()
    arr.flags.writeable = False
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ScalarMap:
    """One real value per pixel, e.g. the center heatmap."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DimensionError(f"scalar map must be a non-empty 2-D grid, got {values.shape}")
        _check_finite(values, "scalar map")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class OffsetField:
    """Per-pixel 2-vectors ``(d_row, d_col)`` stored as two planes."""

    d_row: np.ndarray
    d_col: np.ndarray

    def __post_init__(self):
        d_row = _frozen(self.d_row, np.float64)
        d_col = _frozen(self.d_col, np.float64)
        if d_row.ndim != 2 or d_row.shape != d_col.shape or d_row.size == 0:
            raise DimensionError(
                f"offset planes must be equal non-empty 2-D grids, got {d_row.shape} and {d_col.shape}"
            )
        _check_finite(d_row, "offset field")
        _check_finite(d_col, "offset field")
        object.__setattr__(self, "d_row", d_row)
        object.__setattr__(self, "d_col", d_col)

    @classmethod
    def from_hwc(cls, vectors) -> "OffsetField":
        vectors = np.asarray(vectors)
        if vectors.ndim != 3 or vectors.shape[2] != 2:
            raise DimensionError(f"expected (H, W, 2) offsets, got {vectors.shape}")
        return cls(vectors[..., 0], vectors[..., 1])

    @classmethod
    def zeros(cls, height: int, width: int) -> "OffsetField":
        z = np.zeros((height, width))
        return cls(z, z)

    def to_hwc(self) -> np.ndarray:
        return np.stack([self.d_row, self.d_col], axis=-1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.d_row.shape

    def vector(self, p) -> tuple[float, float]:
        r, c = _check_pixel(p, self.shape)
        return float(self.d_row[r, c]), float(self.d_col[r, c])


@dataclass(frozen=True)
class SemanticProbMap:
    """Class probabilities per pixel, shape ``(K, H, W)``; class 0 is background."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs, np.float64)
        if probs.ndim != 3 or probs.shape[0] < 2 or probs.shape[1] < 1 or probs.shape[2] < 1:
            raise DimensionError(f"expected (K>=2, H, W) probabilities, got {probs.shape}")
        _check_finite(probs, "semantic map")
        if (probs < 0).any():
            raise ValueError("semantic probabilities must be non-negative")
        if np.abs(probs.sum(axis=0) - 1.0).max() > PROB_SUM_TOL:
            raise ValueError("semantic probabilities must sum to 1 per pixel")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_hwc(cls, probs) -> "SemanticProbMap":
        probs = np.asarray(probs)
        if probs.ndim != 3:
            raise DimensionError(f"expected (H, W, K) probabilities, got {probs.shape}")
        return cls(np.moveaxis(probs, -1, 0))

    @classmethod
    def one_hot(cls, labels, num_classes: int) -> "SemanticProbMap":
        labels = np.asarray(labels)
        probs = np.zeros((num_classes,) + labels.shape)
        for k in range(num_classes):
            probs[k][labels == k] = 1.0
        return cls(probs)

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.probs, 0, -1)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[1:]


@dataclass(frozen=True)
class IdentityMap:
    """Instance id per pixel, 0 for background."""

    ids: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.ids)
        if raw.dtype.kind == "i" and raw.size and raw.min() < 0:
            raise ValueError("identity map ids must be non-negative")
        ids = _frozen(raw, np.uint32)
        if ids.ndim != 2 or ids.size == 0:
            raise DimensionError(f"identity map must be a non-empty 2-D grid, got {ids.shape}")
        object.__setattr__(self, "ids", ids)

    @classmethod
    def empty(cls, height: int, width: int) -> "IdentityMap":
        return cls(np.zeros((height, width), dtype=np.uint32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def instance_ids(self) -> list[int]:
        """Sorted nonzero ids present in the map."""
        present = np.unique(self.ids)
        return [int(i) for i in present if i != 0]

    def is_compact(self) -> bool:
        """True when the nonzero ids are exactly ``1..M``."""
        ids = self.instance_ids()
        return ids == list(range(1, len(ids) + 1))

    def mask(self, instance_id: int) -> np.ndarray:
        return self.ids == instance_id


@dataclass(frozen=True)
class FramePrediction:
    """All dense maps predicted for one frame.

    ``inter_offsets`` holds ``(reference_frame_index, OffsetField)`` pairs in
    ascending reference order; every reference precedes ``index``.
    """

    index: int
    semantic: SemanticProbMap
    heatmap: ScalarMap
    intra_offset: OffsetField
    inter_offsets: tuple[tuple[int, OffsetField], ...] = field(default=())

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("frame index must be non-negative")
        inter = tuple(sorted(((int(r), f) for r, f in self.inter_offsets), key=lambda x: x[0]))
        shape = self.semantic.shape
        _require_same_shape(shape, self.heatmap.shape, self.intra_offset.shape, *(f.shape for _, f in inter))
        refs = [r for r, _ in inter]
        if len(set(refs)) != len(refs):
            raise ValueError("duplicate reference frame in inter offsets")
        if any(r < 0 or r >= self.index for r in refs):
            raise ValueError(f"reference frames must precede frame {self.index}, got {refs}")
        object.__setattr__(self, "inter_offsets", inter)

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantic.shape

    @property
    def reference_indices(self) -> list[int]:
        return [r for r, _ in self.inter_offsets]

    def inter(self, reference_index: int) -> OffsetField:
        for r, f in self.inter_offsets:
            if r == reference_index:
                return f
        raise KeyError(f"frame {self.index} has no inter offset for reference {reference_index}")


def _require_same_shape(*shapes: Iterable[int]) -> None:
    first = tuple(shapes[0])
    for s in shapes[1:]:
        if tuple(s) != first:
            raise DimensionError(f"map shapes differ: {first} vs {tuple(s)}")


def _check_pixel(p, shape) -> tuple[int, int]:
    r, c = int(p[0]), int(p[1])
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise BoundsError(f"pixel {(r, c)} outside grid {shape}")
    return r, c


def require_same_shape(*maps) -> tuple[int, int]:
    """Raise DimensionError unless every map (or array) shares one grid."""
    shapes = [m.shape if not isinstance(m, np.ndarray) else m.shape[-2:] for m in maps]
    _require_same_shape(*shapes)
    return tuple(shapes[0])


def warp_coordinate(p, field: OffsetField) -> tuple[float, float]:
    """Return ``p + field(p)`` as a real coordinate; may fall outside the grid."""
    r, c = _check_pixel(p, field.shape)
    return r + float(field.d_row[r, c]), c + float(field.d_col[r, c])


def foreground_from_probs(probs: np.ndarray) -> np.ndarray:
    """Foreground test on a raw ``(K, H, W)`` array without validation.

    A pixel is foreground when some non-background class strictly beats the
    background probability; ties resolve to the lowest index, i.e. background.
    """
    best_fg = probs[1] if probs.shape[0] == 2 else np.max(probs[1:], axis=0)
    return best_fg > probs[0]


def foreground_mask(sem: SemanticProbMap) -> np.ndarray:
    """Boolean grid, True where the per-pixel argmax class is not background."""
    return foreground_from_probs(sem.probs)


@dataclass(frozen=True)
class InstanceFlow:
    """Center-to-center motion of one instance towards one reference frame."""

    instance_id: int
    reference_index: int
    vector: tuple[float, float]
    support: int

    def __post_init__(self):
        if self.support < 1:
            raise ValueError("instance flow needs at least one supporting pixel")
        if not all(np.isfinite(self.vector)):
            raise ValueError("instance flow vector must be finite")


@dataclass
class InstanceRecord:
    """One instance detected in a frame.

    ``flows`` is keyed by reference frame index. ``global_id`` stays 0 until
    the instance has been matched or given a new identity.
    """

    local_id: int
    center: tuple[float, float]
    pixel_count: int
    peak_value: float
    frame_index: int = 0
    global_id: int = 0
    flows: dict[int, InstanceFlow] = field(default_factory=dict)
    class_scores: np.ndarray | None = None

    def __post_init__(self):
        if self.pixel_count < 1:
            raise ValueError("an instance record needs at least one pixel")
        if any(r >= self.frame_index for r in self.flows):
            raise ValueError("flows may only reference earlier frames")
