import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from instflow.core import IdentityMap, InstanceRecord, ScalarMap, SemanticProbMap
from instflow.errors import MissingInstanceError
from instflow.labeling import (
    TrackLabel,
    class_evidence,
    combine_score,
    finalize_labels,
    frame_class_evidence,
    hard_label,
    instance_score,
)
from instflow.matching import TrackerState


def _sem(vectors, shape):
    return SemanticProbMap(np.moveaxis(np.array(vectors, dtype=float).reshape(shape + (-1,)), -1, 0))


def test_constant_evidence():
    sem = _sem([[0, 1, 0]] * 4, (2, 2))
    assert frame_class_evidence(sem, IdentityMap(np.ones((2, 2), int)), 1).tolist() == [0, 1, 0]


def test_two_pixel_mean():
    sem = _sem([[0, 0.8, 0.2], [0, 0.6, 0.4]], (1, 2))
    assert frame_class_evidence(sem, IdentityMap(np.ones((1, 2), int)), 1) == pytest.approx([0, 0.7, 0.3])


@given(st.integers(0, 2**31 - 1))
def test_evidence_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    raw = rng.random((4, 6, 6))
    probs = raw / raw.sum(axis=0)
    labels = rng.integers(0, 4, size=(6, 6))
    labels[0, 0] = 2
    got = frame_class_evidence(SemanticProbMap(probs), IdentityMap(labels), 2)
    assert got == pytest.approx(oracles.class_mean(probs, labels, 2), abs=1e-12)


def test_batched_evidence_rows():
    rng = np.random.default_rng(1)
    raw = rng.random((3, 5, 5))
    probs = raw / raw.sum(axis=0)
    labels = rng.integers(1, 3, size=(5, 5))
    flat = labels.ravel()
    pixels = np.concatenate([np.flatnonzero(flat == 1), np.flatnonzero(flat == 2)])
    counts = np.array([(flat == 1).sum(), (flat == 2).sum()])
    ev = class_evidence(probs, pixels, np.array([0, counts[0]]), counts)
    assert ev.shape == (3, 3) and not ev[0].any()
    for m in (1, 2):
        assert ev[m] == pytest.approx(oracles.class_mean(probs, labels, m), abs=1e-12)


def test_missing_instance_raises():
    with pytest.raises(MissingInstanceError):
        frame_class_evidence(_sem([[1, 0]] * 4, (2, 2)), IdentityMap(np.zeros((2, 2), int)), 1)


def _state(accumulators):
    state = TrackerState()
    state.track_accumulators = {g: np.asarray(v, dtype=float) for g, v in accumulators.items()}
    return state


def test_unanimous_and_singleton_labels():
    labels = finalize_labels(_state({1: np.array([0, 0.1, 0.9]) * 3, 2: [0.2, 0.5, 0.3]}))
    assert [(l.global_id, l.class_index) for l in labels] == [(1, 2), (2, 1)]


def test_mass_not_vote_count():
    frames = [[0.1, 0.9, 0.0], [0.1, 0.9, 0.0], [0.0, 0.0, 1.0]]
    label = finalize_labels(_state({5: np.sum(frames, axis=0)}))[0]
    assert label.class_index == 1
    assert label.label_confidence == pytest.approx(1.8 / 3.0)


def test_background_never_wins_and_ties_go_low():
    assert hard_label(np.array([0.9, 0.05, 0.05]))[0] == 1
    assert hard_label(np.array([0.0, 0.5, 0.5]))[0] == 1
    assert hard_label(np.zeros(3)) == (1, 0.0)
    with pytest.raises(ValueError):
        TrackLabel(1, 0, 0.5)


@given(st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=1, max_size=8), st.randoms())
def test_labels_invariant_to_frame_order(frames, rnd):
    shuffled = list(frames)
    rnd.shuffle(shuffled)
    a = finalize_labels(_state({1: np.sum(frames, axis=0)}))[0]
    b = finalize_labels(_state({1: np.sum(shuffled, axis=0)}))[0]
    assert a.class_index == b.class_index
    assert a.label_confidence == pytest.approx(b.label_confidence)


@pytest.mark.parametrize("sem, center, expected", [(1.0, 0.5, 0.5), (0.7, 0.9, 0.63), (0.0, 0.0, 0.0)])
def test_combine_score(sem, center, expected):
    assert combine_score(sem, center) == pytest.approx(expected)


def test_instance_score_uses_class_mean_and_center_peak():
    sem = _sem([[0, 0.6, 0.4], [0, 0.8, 0.2], [1, 0, 0], [1, 0, 0]], (2, 2))
    ids = IdentityMap(np.array([[1, 1], [0, 0]]))
    heat = ScalarMap(np.array([[0.9, 0.2], [0.0, 0.0]]))
    rec = InstanceRecord(1, (0.0, 0.0), 2, 0.9)
    assert instance_score(sem, heat, ids, rec) == pytest.approx(0.7 * 0.9)
    assert instance_score(sem, heat, ids, rec, class_index=2) == pytest.approx(0.3 * 0.9)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 2))
def test_score_bounds_and_monotonicity(s1, s2, c1, c2):
    lo, hi = sorted((s1, s2))
    assert 0 <= combine_score(lo, c2) <= c2
    assert combine_score(lo, c2) <= combine_score(hi, c2)
