import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specexit.scheduler import (OfflineProfile, OnlineState, ScheduleConfig, active_layers,
                                load_profile, online_hot_layers, profile_offline,
                                recompute_counts, save_profile, update_online,
                                weight_fingerprint)


def _profile(counts, L=8):
    return OfflineProfile(num_layers=L, exit_counts=np.array(counts, np.uint64), fingerprint=1)


def test_ranking_descending_with_tie_break():
    prof = _profile([5, 9, 9, 0, 2, 0, 0, 100])  # final layer count ignored
    assert prof.ranked_layers == [1, 2, 0, 4, 3, 5, 6]


def test_online_queue_eviction():
    state = OnlineState(8, ScheduleConfig(queue_len=3, radius=1))
    for e in [0, 1, 2, 3]:
        update_online(state, e)
    assert state.queue == [1, 2, 3]
    assert np.array_equal(state.neighbor_counts, recompute_counts(state))


def test_neighborhood_clipped_at_edges():
    state = OnlineState(8, ScheduleConfig(queue_len=5, radius=2))
    update_online(state, 0)
    assert online_hot_layers(state) == [0, 1, 2]
    update_online(state, 7)
    assert state.neighbor_counts[7] == 1  # counted, but never a predictor layer
    assert online_hot_layers(state) == [0, 1, 2, 5, 6]


def test_update_rejects_out_of_range():
    state = OnlineState(8, ScheduleConfig())
    with pytest.raises(ValueError):
        update_online(state, 8)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 4),
       st.lists(st.integers(0, 100), min_size=1, max_size=120), st.integers(0, 2**32 - 1))
def test_incremental_equals_scratch(L, qlen, radius, stream, seed):
    state = OnlineState(L, ScheduleConfig(queue_len=qlen, radius=radius))
    for raw in stream:
        update_online(state, raw % L)
        assert np.array_equal(state.neighbor_counts, recompute_counts(state))
        assert len(state.queue) <= qlen


def test_active_layers_union_and_clip():
    prof = _profile([10, 0, 0, 0, 0, 0, 5, 0])
    cfg = ScheduleConfig(queue_len=5, radius=1, offline_top_k=2)
    state = OnlineState(8, cfg)
    assert active_layers(prof, state, cfg) == [0, 6]
    update_online(state, 4)
    assert active_layers(prof, state, cfg) == [0, 3, 4, 5, 6]
    update_online(state, 7)
    act = active_layers(prof, state, cfg)
    assert 7 not in act
    assert act == sorted(set(act))


def test_active_layers_respects_validation():
    prof = _profile([1] * 8)
    cfg = ScheduleConfig(offline_top_k=8)
    with pytest.raises(ValueError):
        active_layers(prof, OnlineState(8, cfg), cfg)


def test_profile_offline_counts():
    class Rec:
        def __init__(self, e):
            self.exit_layer = e
            self.verified = True

    prof = profile_offline(lambda p: [Rec(e) for e in p], [[0, 0, 3], [7]], 8, fingerprint=9)
    assert prof.exit_counts.tolist() == [2, 0, 0, 1, 0, 0, 0, 1]
    with pytest.raises(ValueError):
        profile_offline(lambda p: [], [[1]], 8, fingerprint=9)


def test_profile_roundtrip_and_fingerprint(tmp_path):
    prof = _profile([1, 2, 3, 4, 5, 6, 7, 8])
    path = tmp_path / "p.spxs"
    save_profile(prof, path)
    loaded = load_profile(path, expect_fingerprint=1)
    assert loaded.exit_counts.tolist() == prof.exit_counts.tolist()
    with pytest.raises(ValueError):
        load_profile(path, expect_fingerprint=2)
    bad = tmp_path / "bad.spxs"
    bad.write_bytes(b"ZZZZ" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_profile(bad)


def test_weight_fingerprint_sensitivity(tmp_path):
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    a.write_bytes(b"hello world")
    b.write_bytes(b"hello worle")
    assert weight_fingerprint(a) != weight_fingerprint(b)
    assert 0 <= weight_fingerprint(a) < 2**64
