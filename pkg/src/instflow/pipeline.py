"""Online sequence driver: grouping, instance flow, matching and label accumulation per frame.

Frames are consumed strictly in order; parallelism lives inside each stage
and never changes results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import FramePrediction, IdentityMap
from .errors import MissingFlowError
from .evaluation import Track, tracks_from_identity_maps
from .flow import FLOW_METHODS, InstanceSamples, iou_propagation_match
from .grouping import GroupingParams, segment
from .labeling import class_evidence, combine_score, finalize_labels
from .matching import NEW, MatchingParams, TrackerState, distance_matrix, match_instances, propagate
from .parallel import SERIAL, Workers

STAGES = ("grouping", "flow", "matching", "labeling")


@dataclass(frozen=True)
class PipelineParams:
    grouping: GroupingParams = GroupingParams()
    matching: MatchingParams = MatchingParams()
    flow_method: str = "residual"
    flow_stride: int = 1

    def __post_init__(self):
        if self.flow_method not in FLOW_METHODS:
            raise ValueError(f"flow method must be one of {FLOW_METHODS}, got {self.flow_method!r}")
        if self.flow_stride < 1:
            raise ValueError("flow stride must be >= 1")

    def to_dict(self) -> dict:
        return {
            "nms_window": self.grouping.nms_window,
            "center_threshold": self.grouping.center_threshold,
            "epsilon": self.matching.epsilon,
            "reference_policy": str(self.matching.policy),
            "flow_method": self.flow_method,
            "flow_stride": self.flow_stride,
        }


@dataclass(frozen=True)
class TrackSummary:
    global_id: int
    class_index: int
    label_confidence: float
    score: float
    frames: tuple[int, ...]


@dataclass
class PipelineResult:
    identity_maps: list[IdentityMap]
    tracks: list[TrackSummary]
    timings: list[dict[str, float]] = field(default_factory=list)

    def eval_tracks(self) -> list[Track]:
        return tracks_from_identity_maps(
            self.identity_maps,
            {t.global_id: t.class_index for t in self.tracks},
            {t.global_id: t.score for t in self.tracks},
        )


class SequenceTracker:
    """Stateful per-sequence tracker; feed frames with :meth:`step`, then call :meth:`finish`."""

    def __init__(self, params: PipelineParams = PipelineParams(), workers: Workers = SERIAL):
        self.params = params
        self.workers = workers
        self.state = TrackerState()
        self.timings: list[dict[str, float]] = []
        self._frame_evidence: dict[int, list[tuple[np.ndarray, float]]] = {}
        self._frames_seen: dict[int, list[int]] = {}
        self._last_map: IdentityMap | None = None
        self._expected = 0

    def step(self, pred: FramePrediction) -> IdentityMap:
        if pred.index != self._expected:
            raise ValueError(f"frames must arrive in order: expected {self._expected}, got {pred.index}")
        self._expected += 1
        t = pred.index
        params = self.params
        policy = params.matching.policy
        tick = time.perf_counter()

        seg = segment(pred, params.grouping, self.workers)
        records = seg.records
        m = seg.num_instances
        t_group = time.perf_counter()

        refs = [r for r in policy.select(t) if r in self.state.frame_memory]
        for r in refs:
            if r not in pred.reference_indices:
                raise MissingFlowError(f"frame {t} lacks inter-frame offsets towards reference {r}")
        flows = []
        if refs and m and params.flow_method != "iou":
            samples = InstanceSamples(seg.pixels, seg.starts, seg.counts, params.flow_stride)
            if params.flow_method == "residual":
                samples.cache_intra(pred.intra_offset)
                flows = self.workers.map(lambda r: samples.residual(pred.intra_offset, pred.inter(r), r), refs)
            else:
                flows = self.workers.map(lambda r: samples.average(pred.inter(r), r), refs)
        for r, per_ref in zip(refs, flows):
            for rec in records:
                rec.flows[r] = per_ref[rec.local_id]
        t_flow = time.perf_counter()

        if params.flow_method == "iou":
            matches = self._iou_matches(pred, seg.ids, records)
        else:
            epsilon = params.matching.resolve_epsilon(pred.shape)
            memories = self.state.references(refs)
            distances = self.workers.map(lambda mem: distance_matrix(records, mem), memories)
            matches = match_instances(records, memories, epsilon, t, distances)
        propagate(self.state, t, records, matches, None, policy)
        lut = np.zeros(m + 1, dtype=np.uint32)
        for rec in records:
            lut[rec.local_id] = rec.global_id
        flat = np.zeros(pred.shape[0] * pred.shape[1], dtype=np.uint32)
        flat[seg.pixels] = lut[seg.labels]
        global_map = IdentityMap(flat.reshape(pred.shape))
        t_match = time.perf_counter()

        evidence = class_evidence(pred.semantic.probs, seg.pixels, seg.starts, seg.counts)
        self.state.frame_memory[t].class_scores = evidence[1:]
        for rec in records:
            rec.class_scores = evidence[rec.local_id]
            g = rec.global_id
            acc = self.state.track_accumulators.get(g)
            self.state.track_accumulators[g] = rec.class_scores.copy() if acc is None else acc + rec.class_scores
            self._frame_evidence.setdefault(g, []).append((rec.class_scores, rec.peak_value))
            self._frames_seen.setdefault(g, []).append(t)
        self._last_map = global_map
        t_label = time.perf_counter()

        self.timings.append(
            {
                "grouping": t_group - tick,
                "flow": t_flow - t_group,
                "matching": t_match - t_flow,
                "labeling": t_label - t_match,
                "assembly": t_match - tick,
                "total": t_label - tick,
            }
        )
        return global_map

    def _iou_matches(self, pred: FramePrediction, ids: IdentityMap, records) -> dict[int, int | None]:
        """Single-frame baseline: vote through the offsets into the previous frame's global map."""
        matches: dict[int, int | None] = {rec.local_id: NEW for rec in records}
        t = pred.index
        if t == 0 or self._last_map is None:
            return matches
        if t - 1 not in pred.reference_indices:
            raise MissingFlowError(f"frame {t} lacks inter-frame offsets towards frame {t - 1}")
        claimed = set()
        for local, g in sorted(iou_propagation_match(ids, pred.inter(t - 1), self._last_map).items()):
            if g is not None and g not in claimed:
                matches[local] = g
                claimed.add(g)
        return matches

    def finish(self) -> list[TrackSummary]:
        """Harden labels; a track's score is the mean per-frame score under its final class."""
        out = []
        for label in finalize_labels(self.state):
            g = label.global_id
            per_frame = [combine_score(float(ev[label.class_index]), peak) for ev, peak in self._frame_evidence[g]]
            out.append(
                TrackSummary(g, label.class_index, label.label_confidence, float(np.mean(per_frame)), tuple(self._frames_seen[g]))
            )
        return out


def run_pipeline(
    frames: Iterable[FramePrediction],
    params: PipelineParams = PipelineParams(),
    workers: Workers = SERIAL,
) -> PipelineResult:
    """Track a whole sequence; ``frames`` may be a lazy iterator."""
    tracker = SequenceTracker(params, workers)
    maps = [tracker.step(pred) for pred in frames]
    return PipelineResult(maps, tracker.finish(), tracker.timings)


def bench(
    frames: list[FramePrediction],
    params: PipelineParams = PipelineParams(),
    workers: Workers = SERIAL,
    repetitions: int = 1,
) -> dict:
    """Time the pipeline over ``repetitions`` full runs of preloaded frames.

    The report holds, per stage, the mean and minimum over repetitions of the
    mean per-frame wall time (seconds), plus the worker count. ``maps`` of the
    last run are returned so callers can check determinism.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    per_rep = []
    result = None
    for _ in range(repetitions):
        result = run_pipeline(frames, params, workers)
        per_rep.append({k: float(np.mean([ft[k] for ft in result.timings])) for k in result.timings[0]})
    stages = {k: {"mean": float(np.mean([r[k] for r in per_rep])), "min": float(min(r[k] for r in per_rep))} for k in per_rep[0]}
    return {
        "workers": workers.count,
        "repetitions": repetitions,
        "num_frames": len(frames),
        "per_frame_seconds": stages,
        "samples": per_rep,
        "result": result,
    }
