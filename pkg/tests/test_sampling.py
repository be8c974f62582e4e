import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from movesynth.core_types import Frame, Sequence, tasks_equal, validate_task
from movesynth.errors import ConfigError, LengthError, NoEligibleClipError
from movesynth.sampling import (SamplerConfig, build_episodes, eligible_clips, load_episodes,
                                move_index_pairs, moves_of, sample_episode, sample_task,
                                save_episodes)


def _seq(n, start=0):
    frames = tuple(Frame(np.full((2, 2, 3), i / (n + 1))) for i in range(1, n + 1))
    return Sequence(frames, tuple(range(1, n + 1)), start)


def _move_values(seq):
    return [tuple(p for p in m.poses) for m in moves_of(seq)]


def test_moves_even():
    assert _move_values(_seq(4)) == [(1, 2), (3, 4)]


def test_moves_minimal():
    assert _move_values(_seq(2)) == [(1, 2)]


def test_moves_odd_tail_overlaps():
    assert _move_values(_seq(5)) == [(1, 2), (3, 4), (4, 5)]


def test_move_needs_two_frames():
    with pytest.raises(LengthError):
        move_index_pairs(1)


@given(st.integers(2, 60), st.integers(0, 100))
def test_moves_cover_sequence_consecutively(n, start):
    moves = moves_of(_seq(n, start))
    covered = set()
    for m in moves:
        assert m.indices[1] == m.indices[0] + 1
        covered |= set(m.indices)
    assert covered == set(range(start, start + n))


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(K=1)
    with pytest.raises(ConfigError):
        SamplerConfig(interval=-1)


@pytest.mark.parametrize("K,support", [(3, 2), (5, 4), (8, 7), (10, 9)])
def test_support_lengths(small_manifest, K, support):
    t = sample_task(small_manifest.split("train"), SamplerConfig(K=K), 1)
    assert len(t.support) == support
    assert len(t.query) == support  # query defaults to the support's move count
    validate_task(t)


def test_k5_support_two_moves_k3_one(small_manifest):
    train = small_manifest.split("train")
    assert len(moves_of(sample_task(train, SamplerConfig(K=5), 0).support)) == 2
    assert len(moves_of(sample_task(train, SamplerConfig(K=3), 0).support)) == 1


def test_same_rng_same_task(small_manifest):
    train = small_manifest.split("train")
    a = sample_task(train, SamplerConfig(K=5), 42)
    b = sample_task(train, SamplerConfig(K=5), 42)
    assert tasks_equal(a, b)


def test_windows_disjoint_over_many_samples(small_manifest):
    """10^4 draws: support and query never overlap and are >= interval frames apart."""
    train = small_manifest.split("train")
    rng = np.random.default_rng(7)
    n = 0
    for K in (3, 5, 8, 10):
        cfg = SamplerConfig(K=K, interval=5)
        for _ in range(2500):
            t = sample_task(train, cfg, rng)
            assert t.support.start_index == t.reference_index + 1
            assert t.query.start_index >= t.support.end_index + cfg.interval
            assert t.query.end_index <= train.clip(t.clip_id)["length"]
            n += 1
    assert n == 10 ** 4


def test_every_eligible_clip_gets_sampled(small_manifest):
    train = small_manifest.split("train")
    rng = np.random.default_rng(3)
    counts = {}
    for _ in range(600):
        t = sample_task(train, SamplerConfig(K=5), rng)
        counts[t.clip_id] = counts.get(t.clip_id, 0) + 1
    clips = [c["clip_id"] for c in eligible_clips(train, SamplerConfig(K=5).window())]
    expected = 600 / len(clips)
    chi2 = sum((counts.get(c, 0) - expected) ** 2 / expected for c in clips)
    assert set(counts) == set(clips)
    assert chi2 < 20  # loose bound for len(clips) - 1 degrees of freedom


def test_no_eligible_clip(small_manifest):
    with pytest.raises(NoEligibleClipError):
        sample_task(small_manifest.split("train"), SamplerConfig(K=5, query_len=200), 0)
    with pytest.raises(NoEligibleClipError):
        sample_episode(small_manifest.split("test"), SamplerConfig(), "p000", 0)


def test_episode_protocol(small_manifest):
    test = small_manifest.split("test")
    eps = build_episodes(test, SamplerConfig(K=5), per_person=20)
    assert len(eps) == 20 * len(test.person_ids)
    for ep in eps:
        assert len(ep.task.query) == 50
        assert ep.K == 5
        validate_task(ep.task)
    assert len({e.episode_id for e in eps}) == len(eps)


def test_episode_replay_is_bit_deterministic(small_manifest, tmp_path):
    test = small_manifest.split("test")
    eps = build_episodes(test, SamplerConfig(K=3), per_person=4)
    save_episodes(tmp_path / "e.json", eps)
    first = (tmp_path / "e.json").read_bytes()
    back = load_episodes(tmp_path / "e.json", test)
    assert [e.episode_id for e in back] == [e.episode_id for e in eps]
    assert all(tasks_equal(a.task, b.task) for a, b in zip(eps, back))
    save_episodes(tmp_path / "f.json", back)
    assert (tmp_path / "f.json").read_bytes() == first
    assert json.loads(first)["format"] == "movesynth-episodes/1"


def test_build_episodes_deterministic(small_manifest):
    test = small_manifest.split("test")
    a = build_episodes(test, SamplerConfig(K=8, seed=4), per_person=3)
    b = build_episodes(test, SamplerConfig(K=8, seed=4), per_person=3)
    assert all(tasks_equal(x.task, y.task) for x, y in zip(a, b))
