from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionrecomp.errors import InvalidInputError
from motionrecomp.imaging import ImageSequence
from motionrecomp.recomposer import (
    CATEGORIES,
    CompositionType,
    Relation,
    SamplerConfig,
    SamplingConfig,
    enumerate_pairs,
    reverse,
    sample_tuple,
)

SSS = SamplingConfig.SAME_START_SAME_SUB
SSA = SamplingConfig.SAME_START_ADJACENT
DSA = SamplingConfig.DIFF_START_ADJACENT


def segment_of(pos, length, cuts):
    """Index of the cut-free segment holding ``pos``."""
    return sum(1 for c in cuts if 0 <= c < length - 1 and c < pos)


def check_tuple(t, length, cfg, cuts=()):
    """Independent statement of every structural promise a tuple makes."""
    d = t.span
    assert 1 <= d <= cfg.span_limit
    for m in t.members:
        assert cfg.min_len <= len(m) <= cfg.max_len
        assert all(0 <= p < length for p in m.positions)
        assert len({segment_of(p, length, cuts) for p in m.positions}) == 1
        assert all(a != b for a, b in zip(m.positions, m.positions[1:]))
        assert max(m.positions) - min(m.positions) <= d
        if cfg.max_step is not None:
            assert max(abs(b - a) for a, b in zip(m.positions, m.positions[1:])) <= cfg.max_step
    for m in (t.f1, t.f2):
        assert m.ctype is CompositionType.FORWARD
        assert all(b > a for a, b in zip(m.positions, m.positions[1:]))
        assert m.positions[-1] - m.positions[0] == d
    for m in (t.b1, t.b2):
        assert m.ctype is CompositionType.BACKWARD
        assert all(b < a for a, b in zip(m.positions, m.positions[1:]))
        assert m.positions[0] - m.positions[-1] == d
    for m in (t.i1, t.i2):
        assert m.ctype is CompositionType.IDENTITY
        assert m.positions[0] == m.positions[-1]
        # out and back: one turning point
        diffs = np.sign(np.diff(m.positions))
        assert np.count_nonzero(np.diff(diffs)) == 1
    assert t.f1.positions[0] == t.f2.positions[0] and t.f1.positions[-1] == t.f2.positions[-1]
    assert t.b1.positions[0] == t.b2.positions[0] and t.b1.positions[-1] == t.b2.positions[-1]
    assert t.f1.positions != t.f2.positions and t.b1.positions != t.b2.positions

    f0, f_end = t.f1.positions[0], t.f1.positions[-1]
    b0, b_end = t.b1.positions[0], t.b1.positions[-1]
    if t.config is SSS:
        assert (b0, b_end) == (f_end, f0)
        anchors = {f0}
    elif t.config is SSA:
        assert f0 == b0
        anchors = {f0}
    else:
        assert f0 != b0 and f_end == b_end
        anchors = {f0, b0}
    for m in (t.i1, t.i2):
        assert m.positions[0] in anchors
        lo, hi = min(m.positions), max(m.positions)
        window = (min(f0, f_end, b0, b_end), max(f0, f_end, b0, b_end))
        assert window[0] <= lo and hi <= window[1]


def test_fuzz_invariants_100k():
    rng = np.random.default_rng(2024)
    samples = 0
    skipped = 0
    configs = Counter()
    while samples < 100_000:
        min_len = int(rng.integers(2, 6))
        max_len = int(rng.integers(max(min_len, 3), 8))
        cfg = SamplerConfig(min_len=min_len, max_len=max_len)
        length = int(rng.integers(2 * max_len - 1, 40))
        n_cuts = int(rng.integers(0, 3))
        cuts = tuple(int(c) for c in rng.integers(0, length - 1, size=n_cuts))
        for _ in range(10):
            t = sample_tuple(length, cfg, rng, cuts)
            if t is None:
                skipped += 1
                continue
            check_tuple(t, length, cfg, cuts)
            configs[t.config] += 1
            samples += 1
    assert set(configs) == set(SamplingConfig)
    assert skipped < samples


def test_fuzz_invariants_bounded_steps():
    rng = np.random.default_rng(77)
    samples = 0
    configs = Counter()
    jumps = Counter()
    while samples < 20_000:
        min_len = int(rng.integers(2, 6))
        max_len = int(rng.integers(max(min_len, 3), 8))
        cfg = SamplerConfig(min_len=min_len, max_len=max_len, max_step=int(rng.integers(2, 4)))
        length = int(rng.integers(2 * max_len - 1, 40))
        cuts = tuple(int(c) for c in rng.integers(0, length - 1, size=int(rng.integers(0, 3))))
        t = sample_tuple(length, cfg, rng, cuts)
        if t is None:
            continue
        check_tuple(t, length, cfg, cuts)
        configs[t.config] += 1
        jumps.update(abs(b - a) for m in t.members for a, b in zip(m.positions, m.positions[1:]))
        samples += 1
    assert set(configs) == set(SamplingConfig)
    assert set(jumps) == {1, 2, 3}


def test_bounded_paths_are_uniform():
    # monotone 0 -> 5 in 3 jumps of at most 2 frames: (1,2,2), (2,1,2), (2,2,1)
    from motionrecomp.recomposer import _monotone_path

    rng = np.random.default_rng(8)
    counts = Counter(_monotone_path(rng, 0, 5, 4, max_step=2) for _ in range(3000))
    assert set(counts) == {(0, 1, 3, 5), (0, 2, 3, 5), (0, 2, 4, 5)}
    # binomial sd for p = 1/3, n = 3000 is ~26; 4 sd bound
    assert all(abs(c - 1000) < 104 for c in counts.values())


def test_config_choice_is_uniform():
    rng = np.random.default_rng(5)
    cfg = SamplerConfig()
    counts = Counter(sample_tuple(20, cfg, rng).config for _ in range(3000))
    # binomial sd for p = 1/3, n = 3000 is ~26; 4 sd bound
    for c in SamplingConfig:
        assert abs(counts[c] - 1000) < 104


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(SamplingConfig)), st.integers(9, 30))
def test_each_config_alone(seed, config, length):
    cfg = SamplerConfig(configs_enabled=(config,))
    t = sample_tuple(length, cfg, np.random.default_rng(seed))
    if length >= (cfg.min_sequence_length if config is not SSS else cfg.max_len + 1):
        assert t is not None
    if t is not None:
        assert t.config is config
        check_tuple(t, length, cfg)


def test_minimum_length_always_samples():
    cfg = SamplerConfig()
    rng = np.random.default_rng(0)
    for _ in range(2000):
        assert sample_tuple(cfg.min_sequence_length, cfg, rng) is not None


def test_short_or_cut_sequences_are_skipped():
    cfg = SamplerConfig(configs_enabled=("SameStartSameSub",))
    assert sample_tuple(4, cfg, np.random.default_rng(0)) is None
    # every segment has at most 3 frames
    assert sample_tuple(12, cfg, np.random.default_rng(0), cuts=(2, 5, 8)) is None


def test_deterministic_under_seed():
    seq = ImageSequence(np.random.default_rng(0).random((20, 4, 4)).astype(np.float32), "x")
    a = [sample_tuple(seq, SamplerConfig(), np.random.default_rng(9)) for _ in range(3)]
    b = [sample_tuple(seq, SamplerConfig(), np.random.default_rng(9)) for _ in range(3)]
    assert a == b
    np.testing.assert_array_equal(a[0].f1.frames, seq.frames[list(a[0].f1.positions)])


def test_source_indices_follow_frame_numbers():
    seq = ImageSequence(np.zeros((12, 2, 2), np.float32), "v", tuple(range(0, 24, 2)))
    t = sample_tuple(seq, SamplerConfig(), np.random.default_rng(1))
    assert t.f1.source_indices == tuple(2 * p for p in t.f1.positions)


def test_pair_labels_six_negatives():
    pairs = enumerate_pairs()
    pos = [p for p in pairs if p.relation is Relation.POSITIVE]
    neg = [p for p in pairs if p.relation is Relation.NEGATIVE]
    assert {(p.a, p.b) for p in pos} == {("f1", "f2"), ("b1", "b2"), ("i1", "i2")}
    assert len(neg) == 6
    assert all(p.a.endswith("1") and p.b.endswith("2") and p.a[0] != p.b[0] for p in neg)
    assert Counter(p.category for p in pairs) == {c: (1 if c.startswith("positive") else 2) for c in CATEGORIES}


def test_pair_labels_twelve_negatives():
    neg = [p for p in enumerate_pairs(None, 12) if p.relation is Relation.NEGATIVE]
    assert len(neg) == 12
    assert len({frozenset((p.a, p.b)) for p in neg}) == 12
    assert all(p.a[0] != p.b[0] for p in neg)
    with pytest.raises(InvalidInputError):
        enumerate_pairs(None, 7)


def test_reverse_is_an_involution_and_swaps_types():
    t = sample_tuple(20, SamplerConfig(), np.random.default_rng(3))
    for m in t.members:
        assert reverse(reverse(m)) == m
    assert reverse(t.f1).ctype is CompositionType.BACKWARD
    assert reverse(t.b1).ctype is CompositionType.FORWARD
    assert reverse(t.i1).ctype is CompositionType.IDENTITY
    assert reverse(t.f1).positions == t.f1.positions[::-1]


@pytest.mark.parametrize("kwargs", [
    {"min_len": 1},
    {"min_len": 2, "max_len": 2},
    {"min_len": 5, "max_len": 4},
    {"configs_enabled": ()},
    {"negatives_per_tuple": 8},
    {"max_span": 3},
    {"max_step": 1},
])
def test_bad_sampler_config(kwargs):
    with pytest.raises((InvalidInputError, ValueError)):
        SamplerConfig(**kwargs)
