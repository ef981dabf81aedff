import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from factories import disk, exact_frame, random_grouping_case
from instflow.core import FramePrediction, OffsetField, ScalarMap, SemanticProbMap
from instflow.errors import DimensionError
from instflow.grouping import (
    DEFAULT_CENTER_THRESHOLD,
    DEFAULT_NMS_WINDOW,
    Center,
    GroupingParams,
    extract_centers,
    group_pixels,
    segment,
    segment_frame,
)
from instflow.parallel import Workers


def _centers(heat, fg=None, window=5, threshold=0.15):
    heat = np.asarray(heat, dtype=float)
    fg = np.ones(heat.shape, bool) if fg is None else fg
    return extract_centers(ScalarMap(heat), fg, GroupingParams(window, threshold))


def test_defaults_follow_inference_settings():
    assert DEFAULT_NMS_WINDOW == 41
    assert DEFAULT_CENTER_THRESHOLD == 0.15
    assert GroupingParams() == GroupingParams(41, 0.15)


@pytest.mark.parametrize("window, threshold", [(4, 0.1), (0, 0.1), (3, -0.1), (3, 1.5)])
def test_params_validation(window, threshold):
    with pytest.raises(ValueError):
        GroupingParams(window, threshold)


def test_single_peak():
    heat = np.zeros((9, 9))
    heat[4, 4] = 0.9
    assert _centers(heat) == [Center((4, 4), 0.9)]


def test_window_controls_suppression():
    heat = np.zeros((9, 9))
    heat[4, 4], heat[4, 6] = 0.9, 0.8
    assert [c.position for c in _centers(heat, window=5)] == [(4, 4)]
    assert [c.position for c in _centers(heat, window=3)] == [(4, 4), (4, 6)]
    for window in (3, 5):
        expected = oracles.nms_centers(heat, np.ones_like(heat, bool), window, 0.15)
        assert [(c.position, c.peak_value) for c in _centers(heat, window=window)] == expected


def test_plateau_keeps_raster_first():
    heat = np.zeros((7, 7))
    heat[2, 2] = heat[2, 3] = heat[3, 2] = 0.5
    assert [c.position for c in _centers(heat, window=3)] == [(2, 2)]


def test_background_is_removed_before_nms():
    heat = np.zeros((9, 9))
    heat[4, 4], heat[4, 6] = 0.9, 0.8
    fg = np.ones((9, 9), bool)
    fg[4, 4] = False
    assert [c.position for c in _centers(heat, fg, window=5)] == [(4, 6)]


def test_output_order_by_peak_then_position():
    heat = np.zeros((20, 20))
    heat[15, 15] = 0.7
    heat[2, 2] = 0.9
    heat[2, 15] = 0.7
    assert [c.position for c in _centers(heat, window=3)] == [(2, 2), (2, 15), (15, 15)]


def test_size_mismatch_raises():
    with pytest.raises(DimensionError):
        extract_centers(ScalarMap(np.zeros((4, 4))), np.ones((4, 5), bool))
    with pytest.raises(DimensionError):
        group_pixels([], OffsetField.zeros(4, 4), np.ones((5, 4), bool))


@given(
    arrays(np.float64, st.tuples(st.integers(1, 14), st.integers(1, 14)), elements=st.sampled_from([0.0, 0.1, 0.2, 0.5, 0.7, 1.0])),
    st.sampled_from([1, 3, 5, 7]),
    st.sampled_from([0.0, 0.15, 0.5]),
    st.data(),
)
def test_nms_matches_oracle(heat, window, threshold, data):
    fg = data.draw(arrays(np.bool_, heat.shape))
    got = [(c.position, c.peak_value) for c in _centers(heat, fg, window, threshold)]
    assert got == oracles.nms_centers(heat, fg, window, threshold)


@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_raising_threshold_never_adds_centers(heat, t1, t2):
    lo, hi = sorted((t1, t2))
    assert len(_centers(heat, threshold=hi)) <= len(_centers(heat, threshold=lo))


def test_group_single_center_takes_all():
    rng = np.random.default_rng(0)
    field = OffsetField(rng.normal(size=(4, 4)) * 9, rng.normal(size=(4, 4)) * 9)
    ids = group_pixels([Center((0, 0), 1.0)], field, np.ones((4, 4), bool))
    assert (ids.ids == 1).all()


def test_group_exact_offsets_reproduce_partition():
    labels = np.zeros((5, 6), int)
    labels[:, :3] = 1
    labels[:, 3:] = 2
    frame = exact_frame(labels, {1: (1, 1), 2: (2, 3)})
    ids = group_pixels([Center((1, 1), 1.0), Center((2, 3), 1.0)], frame.intra_offset, labels > 0)
    assert np.array_equal(ids.ids, labels)


def test_group_no_centers_is_background():
    ids = group_pixels([], OffsetField.zeros(3, 3), np.ones((3, 3), bool))
    assert not ids.ids.any()


def test_group_ties_go_to_first_center():
    field = OffsetField(np.zeros((1, 3)), np.zeros((1, 3)))
    ids = group_pixels([Center((0, 2), 0.9), Center((0, 0), 0.8)], field, np.ones((1, 3), bool))
    assert ids.ids.tolist() == [[2, 1, 1]]


@given(st.integers(0, 2**31 - 1))
def test_group_matches_exhaustive_scan(seed):
    centers, field, fg = random_grouping_case(np.random.default_rng(seed), max_side=24)
    got = group_pixels(centers, field, fg).ids
    expected = oracles.nearest_center_ids([c.position for c in centers], field.d_row, field.d_col, fg)
    assert np.array_equal(got, expected)


def test_group_large_warps_outside_lookup_grid():
    rng = np.random.default_rng(3)
    fg = np.ones((30, 30), bool)
    field = OffsetField(rng.normal(0, 80, (30, 30)), rng.normal(0, 80, (30, 30)))
    centers = [Center((0, 0), 1.0), Center((29, 29), 1.0), Center((0, 29), 1.0)]
    expected = oracles.nearest_center_ids([c.position for c in centers], field.d_row, field.d_col, fg)
    assert np.array_equal(group_pixels(centers, field, fg).ids, expected)


def test_group_invariant_to_worker_count():
    rng = np.random.default_rng(11)
    h, w = 300, 300
    fg = rng.random((h, w)) < 0.8
    field = OffsetField(rng.normal(0, 20, (h, w)), rng.normal(0, 20, (h, w)))
    centers = [Center((int(r), int(c)), 0.5) for r, c in rng.integers(0, 300, size=(6, 2))]
    base = group_pixels(centers, field, fg).ids
    with Workers(4) as workers:
        assert np.array_equal(group_pixels(centers, field, fg, workers).ids, base)


@given(st.permutations(range(5)))
def test_equal_peak_centers_have_canonical_order(perm):
    heat = np.zeros((30, 30))
    spots = [(3, 20), (3, 4), (15, 15), (26, 2), (26, 27)]
    for r, c in spots:
        heat[r, c] = 0.6
    centers = _centers(heat, window=3)
    assert [c.position for c in centers] == sorted(spots)
    shuffled = [centers[i] for i in perm]
    canonical = sorted(shuffled, key=lambda c: (-c.peak_value, c.position))
    field = OffsetField(np.zeros((30, 30)), np.zeros((30, 30)))
    fg = np.ones((30, 30), bool)
    assert np.array_equal(group_pixels(canonical, field, fg).ids, group_pixels(centers, field, fg).ids)


def test_segment_empty_foreground():
    sem = SemanticProbMap.one_hot(np.zeros((6, 6), int), 2)
    heat = np.zeros((6, 6))
    heat[3, 3] = 1.0
    ids, records = segment_frame(FramePrediction(0, sem, ScalarMap(heat), OffsetField.zeros(6, 6)))
    assert not ids.ids.any() and records == []


def test_segment_single_disk_counts_area():
    mask = disk((32, 32), (15, 16), 6.0)
    frame = exact_frame(mask.astype(int), {1: oracles.mask_barycenter(mask)})
    ids, records = segment_frame(frame, GroupingParams(41, 0.15))
    assert len(records) == 1
    assert records[0].pixel_count == int(mask.sum())
    assert np.array_equal(ids.ids, mask.astype(np.uint32))


def test_segment_overlapping_blobs_match_oracle():
    a = disk((40, 40), (18, 14), 8)
    b = disk((40, 40), (20, 24), 8)
    labels = np.where(b, 2, np.where(a, 1, 0))
    centers = {1: oracles.mask_barycenter(labels == 1), 2: oracles.mask_barycenter(labels == 2)}
    frame = exact_frame(labels, centers)
    ids, records = segment_frame(frame, GroupingParams(5, 0.15))
    assert len(records) == 2
    found = [rec.center for rec in records]
    expected = oracles.nearest_center_ids(found, frame.intra_offset.d_row, frame.intra_offset.d_col, labels > 0)
    assert np.array_equal(ids.ids, expected)


def test_segment_drops_empty_centers_and_compacts():
    labels = np.zeros((20, 20), int)
    labels[2:8, 2:8] = 1
    labels[12:18, 12:18] = 2
    frame = exact_frame(labels, {1: (4.5, 4.5), 2: (14.5, 14.5)})
    heat = frame.heatmap.values.copy()
    heat[10, 10] = 2.0
    sem = frame.semantic.probs.copy()
    sem[:, 10, 10] = [0.0, 1.0, 0.0]
    pred = FramePrediction(0, SemanticProbMap(sem), ScalarMap(heat), frame.intra_offset)
    seg = segment(pred, GroupingParams(3, 0.15))
    assert seg.ids.is_compact()
    assert len(seg.records) == seg.ids.ids.max()
    for rec in seg.records:
        assert rec.pixel_count == int((seg.ids.ids == rec.local_id).sum()) >= 1


@given(st.integers(0, 2**31 - 1))
def test_segment_invariants_on_random_maps(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(4, 30, size=2)
    raw = rng.random((3, h, w))
    pred = FramePrediction(
        0,
        SemanticProbMap(raw / raw.sum(axis=0)),
        ScalarMap(rng.random((h, w))),
        OffsetField(rng.normal(0, 4, (h, w)), rng.normal(0, 4, (h, w))),
    )
    seg = segment(pred, GroupingParams(5, 0.3))
    assert seg.ids.is_compact()
    assert [r.local_id for r in seg.records] == list(range(1, len(seg.records) + 1))
    for rec in seg.records:
        start, count = seg.starts[rec.local_id - 1], seg.counts[rec.local_id - 1]
        members = np.sort(seg.pixels[start:start + count])
        assert np.array_equal(members, np.flatnonzero(seg.ids.ids.ravel() == rec.local_id))
        assert rec.pixel_count == count
