import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from instflow.core import IdentityMap, InstanceFlow, InstanceRecord
from instflow.errors import MissingFlowError
from instflow.matching import (
    FIRST_PLUS_3,
    NEW,
    FrameMemory,
    MatchingParams,
    ReferencePolicy,
    TrackerState,
    default_epsilon,
    distance_matrix,
    match_instances,
    propagate,
    select_references,
)


def _record(local_id, center, flow=(0.0, 0.0), ref=0, frame=5):
    rec = InstanceRecord(local_id, tuple(map(float, center)), 10, 1.0, frame_index=frame)
    rec.flows[ref] = InstanceFlow(local_id, ref, tuple(map(float, flow)), 10)
    return rec


def _memory(frame, gids, centers):
    return FrameMemory(frame, np.array(gids, dtype=np.int64), np.array(centers, dtype=float).reshape(-1, 2), np.zeros((len(gids), 0)))


@pytest.mark.parametrize("t, expected", [(0, []), (1, [0]), (2, [0, 1]), (3, [0, 1, 2]), (10, [0, 7, 8, 9])])
def test_select_references_first_plus_3(t, expected):
    assert select_references(t) == expected


def test_adjacent_policy_and_parse():
    adj = ReferencePolicy.parse("adj-1")
    assert adj.select(10) == [9] and adj.select(0) == []
    assert str(ReferencePolicy.parse("first+2")) == "first+2"
    assert ReferencePolicy.parse("first+3") == FIRST_PLUS_3
    for bad in ("first-3", "adj+1", "adj-0", "x"):
        with pytest.raises(ValueError):
            ReferencePolicy.parse(bad)
    with pytest.raises(ValueError):
        select_references(-1)


@given(st.integers(0, 200), st.integers(1, 6), st.booleans())
def test_reference_selection_properties(t, n, first):
    refs = ReferencePolicy(n, first).select(t)
    assert refs == sorted(set(refs))
    assert all(0 <= r < t for r in refs)
    assert len(refs) <= n + int(first)
    if t > 0:
        assert t - 1 in refs
        assert (0 in refs) == (first or t <= n)


def test_default_epsilon_is_tenth_of_diagonal():
    assert default_epsilon((30, 40)) == pytest.approx(5.0)
    assert MatchingParams().resolve_epsilon((30, 40)) == pytest.approx(5.0)
    assert MatchingParams(epsilon=2.5).resolve_epsilon((30, 40)) == 2.5
    with pytest.raises(ValueError):
        MatchingParams(epsilon=0)


def test_distance_examples():
    mem = _memory(0, [1, 2], [(5, 5), (8, 9)])
    d = distance_matrix([_record(1, (5, 5))], mem)
    assert d.tolist() == [[0.0, 5.0]]


def test_distance_2x2_against_scalar_recompute():
    targets = [_record(1, (3.0, 4.0), (1.5, -2.0)), _record(2, (10.0, 1.0), (-0.5, 0.25))]
    refs = [(0.0, 0.0), (7.5, 2.5)]
    d = distance_matrix(targets, _memory(0, [4, 9], refs))
    for i, t in enumerate(targets):
        wr = t.center[0] + t.flows[0].vector[0]
        wc = t.center[1] + t.flows[0].vector[1]
        for j, (rr, rc) in enumerate(refs):
            assert d[i, j] == pytest.approx(math.hypot(wr - rr, wc - rc), abs=1e-12)


def test_distance_missing_flow():
    with pytest.raises(MissingFlowError):
        distance_matrix([_record(1, (0, 0), ref=2)], _memory(0, [1], [(0, 0)]))


def test_match_single_pair():
    assert match_instances([_record(1, (4, 4))], [_memory(0, [3], [(4, 4)])], 5.0) == {1: 3}


def test_match_all_beyond_epsilon():
    targets = [_record(1, (0, 0)), _record(2, (20, 20))]
    assert match_instances(targets, [_memory(0, [1, 2], [(9, 9), (40, 40)])], 5.0) == {1: NEW, 2: NEW}


def test_flow_recovers_correct_pairing():
    targets = [_record(1, (10, 10), (0, -6)), _record(2, (10, 20), (0, -6))]
    ref = _memory(0, [1, 2], [(10, 4), (10, 14)])
    assert match_instances(targets, [ref], 5.0) == {1: 1, 2: 2}
    still = [_record(1, (10, 10)), _record(2, (10, 20))]
    assert match_instances(still, [ref], 5.0)[1] == 2


def _brute_force_greedy(targets, references, eps, frame):
    triples = []
    for ref in references:
        d = distance_matrix(targets, ref)
        for i, t in enumerate(targets):
            for j, g in enumerate(ref.global_ids):
                triples.append((d[i, j], frame - ref.frame_index, int(g), t.local_id))
    result = {t.local_id: NEW for t in targets}
    claimed = set()
    for d, _, g, m in sorted(triples):
        if d <= eps and result[m] is NEW and g not in claimed:
            result[m] = g
            claimed.add(g)
    return result


def _random_matching_case(rng):
    frame = 6
    refs = []
    for r in (0, 3, 4, 5):
        n = int(rng.integers(0, 5))
        gids = rng.choice(np.arange(1, 9), size=n, replace=False)
        refs.append(_memory(r, gids, rng.integers(0, 12, size=(n, 2))))
    targets = []
    for m in range(1, int(rng.integers(1, 6)) + 1):
        rec = InstanceRecord(m, tuple(map(float, rng.integers(0, 12, size=2))), 3, 1.0, frame_index=frame)
        for ref in refs:
            rec.flows[ref.frame_index] = InstanceFlow(m, ref.frame_index, tuple(map(float, rng.integers(-2, 3, size=2))), 3)
        targets.append(rec)
    return targets, refs, frame


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 2.0, 4.0, 100.0]))
def test_match_equals_sorted_triple_oracle(seed, eps):
    targets, refs, frame = _random_matching_case(np.random.default_rng(seed))
    got = match_instances(targets, refs, eps, frame)
    assert got == _brute_force_greedy(targets, refs, eps, frame)
    assigned = [g for g in got.values() if g is not NEW]
    assert len(assigned) == len(set(assigned))


@given(st.integers(0, 2**31 - 1), st.permutations(range(4)))
def test_match_independent_of_reference_order(seed, perm):
    targets, refs, frame = _random_matching_case(np.random.default_rng(seed))
    shuffled = [refs[i] for i in perm]
    assert match_instances(targets, shuffled, 3.0, frame) == match_instances(targets, refs, 3.0, frame)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.floats(0.1, 10))
def test_shrinking_epsilon_only_adds_new(seed, e1, e2):
    lo, hi = sorted((e1, e2))
    targets, refs, frame = _random_matching_case(np.random.default_rng(seed))
    small = match_instances(targets, refs, lo, frame)
    large = match_instances(targets, refs, hi, frame)
    matched_small = sum(g is not NEW for g in small.values())
    matched_large = sum(g is not NEW for g in large.values())
    assert matched_small <= matched_large


def test_same_global_id_in_two_references_claimed_once():
    targets = [_record(1, (0, 0), ref=0), _record(2, (0, 1), ref=0)]
    for t in targets:
        t.flows[4] = InstanceFlow(t.local_id, 4, (0.0, 0.0), 10)
    refs = [_memory(0, [7], [(0, 0)]), _memory(4, [7], [(0, 1)])]
    result = match_instances(targets, refs, 5.0, 5)
    assert sorted(result.values(), key=str) == [7, None]


def test_tie_prefers_nearer_reference_frame():
    target = _record(1, (0, 0), ref=0)
    target.flows[4] = InstanceFlow(1, 4, (0.0, 0.0), 10)
    refs = [_memory(0, [3], [(0, 1)]), _memory(4, [9], [(1, 0)])]
    assert match_instances([target], refs, 5.0, 5) == {1: 9}


def test_propagate_first_frame_and_relabel():
    state = TrackerState()
    records = [InstanceRecord(m, (float(m), 0.0), 1, 1.0) for m in (1, 2, 3)]
    local = IdentityMap(np.array([[0, 1, 2, 3]]))
    state, global_map = propagate(state, 0, records, {1: NEW, 2: NEW, 3: NEW}, local)
    assert [r.global_id for r in records] == [1, 2, 3]
    assert global_map.ids.tolist() == [[0, 1, 2, 3]]
    assert state.next_global_id == 4
    recs = [InstanceRecord(1, (0.0, 0.0), 1, 1.0, frame_index=1), InstanceRecord(2, (1.0, 1.0), 1, 1.0, frame_index=1)]
    state, global_map = propagate(state, 1, recs, {1: NEW, 2: 7}, IdentityMap(np.array([[2, 1, 0]])))
    assert global_map.ids.tolist() == [[7, 4, 0]]
    assert state.next_global_id == 5


def test_propagate_evicts_unreachable_frames():
    state = TrackerState()
    for t in range(8):
        propagate(state, t, [InstanceRecord(1, (0.0, 0.0), 1, 1.0, frame_index=t)], {1: NEW}, None, FIRST_PLUS_3)
    assert sorted(state.frame_memory) == [0, 5, 6, 7]
    assert state.next_global_id == 9
