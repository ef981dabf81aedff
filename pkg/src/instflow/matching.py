"""Inter-frame identity matching over several reference frames.

Each target instance is moved by its instance flow and compared with the
centers stored for every reference frame. Candidate pairs from all
references are pooled and accepted greedily by ascending distance, so an
identity is claimed at most once per frame.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .core import IdentityMap, InstanceRecord
from .errors import MissingFlowError

NEW = None


@dataclass(frozen=True)
class ReferencePolicy:
    """Which past frames serve as references: optionally frame 0, plus the ``n`` preceding frames."""

    n: int = 3
    include_first: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("reference policy needs n >= 1")

    @classmethod
    def parse(cls, text: str) -> "ReferencePolicy":
        """Parse ``first+N`` or ``adj-N``."""
        m = re.fullmatch(r"\s*(first\+|adj-)(\d+)\s*", text)
        if not m:
            raise ValueError(f"unknown reference policy {text!r}; expected first+N or adj-N")
        return cls(int(m.group(2)), m.group(1) == "first+")

    def __str__(self) -> str:
        return f"first+{self.n}" if self.include_first else f"adj-{self.n}"

    def select(self, frame_index: int) -> list[int]:
        if frame_index < 0:
            raise ValueError("frame index must be non-negative")
        refs = set(range(max(0, frame_index - self.n), frame_index))
        if self.include_first and frame_index > 0:
            refs.add(0)
        return sorted(refs)

    def retained(self, next_frame: int) -> set[int]:
        """Past frames that any frame from ``next_frame`` on may still reference."""
        keep = set(range(max(0, next_frame - self.n), next_frame))
        keep.add(0)
        return keep


FIRST_PLUS_3 = ReferencePolicy(3, True)


def select_references(frame_index: int, policy: ReferencePolicy = FIRST_PLUS_3) -> list[int]:
    return policy.select(frame_index)


@dataclass(frozen=True)
class MatchingParams:
    """``epsilon`` in pixels; ``None`` means one tenth of the image diagonal."""

    epsilon: float | None = None
    policy: ReferencePolicy = FIRST_PLUS_3

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def resolve_epsilon(self, shape) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return default_epsilon(shape)


def default_epsilon(shape) -> float:
    return 0.1 * math.hypot(shape[0], shape[1])


@dataclass
class FrameMemory:
    """Instances of one processed frame as seen by later frames."""

    frame_index: int
    global_ids: np.ndarray
    centers: np.ndarray
    class_scores: np.ndarray

    def __len__(self) -> int:
        return self.global_ids.size


@dataclass
class TrackerState:
    """Identity bookkeeping owned by the sequence driver.

    ``track_accumulators`` sums per-frame class evidence for each global id.
    """

    next_global_id: int = 1
    frame_memory: dict[int, FrameMemory] = field(default_factory=dict)
    track_accumulators: dict[int, np.ndarray] = field(default_factory=dict)

    def references(self, indices) -> list[FrameMemory]:
        return [self.frame_memory[r] for r in indices if r in self.frame_memory]


def distance_matrix(targets: list[InstanceRecord], reference: FrameMemory, ref_index: int | None = None) -> np.ndarray:
    """Distances between flow-warped target centers and the reference centers.

    Row ``m`` column ``n`` holds ``|| center_m + flow_m - center_n ||``.
    """
    ref_index = reference.frame_index if ref_index is None else ref_index
    warped = np.empty((len(targets), 2))
    for i, t in enumerate(targets):
        flow = t.flows.get(ref_index)
        if flow is None:
            raise MissingFlowError(f"instance {t.local_id} has no flow towards frame {ref_index}")
        warped[i, 0] = t.center[0] + flow.vector[0]
        warped[i, 1] = t.center[1] + flow.vector[1]
    ref = np.asarray(reference.centers, dtype=np.float64).reshape(-1, 2)
    dr = warped[:, 0:1] - ref[None, :, 0]
    dc = warped[:, 1:2] - ref[None, :, 1]
    return np.sqrt(dr * dr + dc * dc)


def match_instances(
    targets: list[InstanceRecord],
    references: list[FrameMemory],
    epsilon: float,
    frame_index: int | None = None,
    distances: list[np.ndarray] | None = None,
) -> dict[int, int | None]:
    """Greedy one-to-one identity assignment pooled over all references.

    Candidate ``(distance, frame gap, global id, local id)`` tuples are taken
    in ascending order; a pair is accepted when neither side is taken yet and
    the distance is within ``epsilon``. Unmatched targets map to ``NEW``.

    ``distances`` may carry precomputed matrices (one per reference, same
    order), which lets callers compute them in parallel.
    """
    result: dict[int, int | None] = {t.local_id: NEW for t in targets}
    if not targets or not references:
        return result
    if frame_index is None:
        frame_index = targets[0].frame_index
    if distances is None:
        distances = [distance_matrix(targets, ref) for ref in references]

    local = np.array([t.local_id for t in targets], dtype=np.int64)
    d_all, gap_all, g_all, m_all = [], [], [], []
    for ref, d in zip(references, distances):
        if len(ref) == 0:
            continue
        mm, nn = np.nonzero(d <= epsilon)
        d_all.append(d[mm, nn])
        gap_all.append(np.full(mm.size, frame_index - ref.frame_index, dtype=np.int64))
        g_all.append(np.asarray(ref.global_ids, dtype=np.int64)[nn])
        m_all.append(local[mm])
    if not d_all:
        return result
    d_all, gap_all = np.concatenate(d_all), np.concatenate(gap_all)
    g_all, m_all = np.concatenate(g_all), np.concatenate(m_all)
    order = np.lexsort((m_all, g_all, gap_all, d_all))

    claimed: set[int] = set()
    for i in order:
        m, g = int(m_all[i]), int(g_all[i])
        if result[m] is NEW and g not in claimed:
            result[m] = g
            claimed.add(g)
    return result


def propagate(
    state: TrackerState,
    frame_index: int,
    targets: list[InstanceRecord],
    matches: dict[int, int | None],
    local_ids: IdentityMap | None = None,
    policy: ReferencePolicy = FIRST_PLUS_3,
) -> tuple[TrackerState, IdentityMap | None]:
    """Commit one frame's identities to the tracker state (mutated in place).

    Matched targets inherit their global id; the rest receive fresh ids in
    ascending local-id order. The frame joins the reference memory and frames
    the policy can no longer reach are evicted.

    Returns:
        The state and ``local_ids`` rewritten to global ids (``None`` if no
        map was given).
    """
    ordered = sorted(targets, key=lambda t: t.local_id)
    for t in ordered:
        g = matches.get(t.local_id, NEW)
        if g is NEW:
            g = state.next_global_id
            state.next_global_id += 1
        t.global_id = int(g)

    k = 0
    for t in ordered:
        if t.class_scores is not None:
            k = t.class_scores.size
            break
    state.frame_memory[frame_index] = FrameMemory(
        frame_index=frame_index,
        global_ids=np.array([t.global_id for t in ordered], dtype=np.int64),
        centers=np.array([t.center for t in ordered], dtype=np.float64).reshape(-1, 2),
        class_scores=np.array(
            [t.class_scores if t.class_scores is not None else np.zeros(k) for t in ordered]
        ).reshape(len(ordered), k),
    )
    keep = policy.retained(frame_index + 1)
    for r in [r for r in state.frame_memory if r not in keep]:
        del state.frame_memory[r]

    global_map = None
    if local_ids is not None:
        lut = np.zeros(max([t.local_id for t in ordered], default=0) + 1, dtype=np.uint32)
        for t in ordered:
            lut[t.local_id] = t.global_id
        global_map = IdentityMap(lut[local_ids.ids])
    return state, global_map
