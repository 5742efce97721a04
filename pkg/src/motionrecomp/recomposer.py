"""Recomposed subsequences: forward, backward and loop members of a tuple.

Each training sequence contributes six members (two of each type). Members of
the same type realize the same net motion through different intermediate
frames; members of different types do not. Three window layouts keep the
network from solving the task by comparing only first or last frames:

``SameStartSameSub``
    one window ``[a, a+D]``; forward runs ``a -> a+D``, backward ``a+D -> a``,
    loops leave from ``a`` and return.
``SameStartAdjacent``
    windows ``[s-D, s]`` and ``[s, s+D]``; forward runs ``s -> s+D``, backward
    ``s -> s-D``; loops leave ``s`` in either direction.
``DiffStartAdjacent``
    windows ``[a, a+D]`` and ``[a+D, a+2D]``; forward runs ``a -> a+D``,
    backward ``a+2D -> a+D``; loops leave ``a`` or ``a+2D``.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .imaging import ImageSequence


class CompositionType(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    IDENTITY = "identity"


class SamplingConfig(enum.Enum):
    SAME_START_SAME_SUB = "SameStartSameSub"
    SAME_START_ADJACENT = "SameStartAdjacent"
    DIFF_START_ADJACENT = "DiffStartAdjacent"


class Relation(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


MEMBER_NAMES = ("f1", "f2", "b1", "b2", "i1", "i2")
_TYPE_OF = {"f": CompositionType.FORWARD, "b": CompositionType.BACKWARD, "i": CompositionType.IDENTITY}
_SWAP = {
    CompositionType.FORWARD: CompositionType.BACKWARD,
    CompositionType.BACKWARD: CompositionType.FORWARD,
    CompositionType.IDENTITY: CompositionType.IDENTITY,
}


@dataclass(frozen=True)
class RecomposedSequence:
    """A reordering of frames from one source sequence.

    ``positions`` index into ``source.frames``; ``source_indices`` maps them to
    the source's original frame numbers.
    """

    positions: tuple[int, ...]
    ctype: CompositionType
    source: ImageSequence | None = field(default=None, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def source_indices(self) -> tuple[int, ...]:
        if self.source is None:
            return self.positions
        return tuple(self.source.frame_indices[p] for p in self.positions)

    @property
    def frames(self) -> np.ndarray:
        if self.source is None:
            raise InvalidInputError("recomposed sequence has no attached source frames")
        return np.asarray(self.source.frames[list(self.positions)])


@dataclass(frozen=True)
class RecompositionTuple:
    f1: RecomposedSequence
    f2: RecomposedSequence
    b1: RecomposedSequence
    b2: RecomposedSequence
    i1: RecomposedSequence
    i2: RecomposedSequence
    config: SamplingConfig
    span: int = 0  # window extent D in frames

    @property
    def members(self) -> tuple[RecomposedSequence, ...]:
        return tuple(getattr(self, name) for name in MEMBER_NAMES)

    def member(self, name: str) -> RecomposedSequence:
        return getattr(self, name)


@dataclass(frozen=True)
class PairLabel:
    a: str
    b: str
    relation: Relation

    @property
    def category(self) -> str:
        ta, tb = _TYPE_OF[self.a[0]], _TYPE_OF[self.b[0]]
        if self.relation is Relation.POSITIVE:
            return f"positive_{ta.value}"
        order = [CompositionType.FORWARD, CompositionType.BACKWARD, CompositionType.IDENTITY]
        first, second = sorted((ta, tb), key=order.index)
        return f"negative_{first.value}_{second.value}"


CATEGORIES = (
    "positive_forward",
    "positive_backward",
    "positive_identity",
    "negative_forward_backward",
    "negative_forward_identity",
    "negative_backward_identity",
)


@dataclass
class SamplerConfig:
    min_len: int = 3
    max_len: int = 5
    configs_enabled: tuple[SamplingConfig, ...] = tuple(SamplingConfig)
    negatives_per_tuple: int = 6
    seed: int = 0
    max_span: int | None = None  # largest window extent D; default 2 * (max_len - 1)
    max_step: int | None = None  # largest jump between consecutive member frames; None = unbounded

    def __post_init__(self):
        self.configs_enabled = tuple(SamplingConfig(c) for c in self.configs_enabled)
        if self.min_len < 2 or self.max_len < max(self.min_len, 3):
            raise InvalidInputError(
                f"need 2 <= min_len <= max_len and max_len >= 3, got [{self.min_len}, {self.max_len}]")
        if not self.configs_enabled:
            raise InvalidInputError("at least one sampling configuration must be enabled")
        if self.negatives_per_tuple not in (6, 12):
            raise InvalidInputError("negatives_per_tuple must be 6 or 12")
        if self.max_span is not None and self.max_span < self.max_len:
            raise InvalidInputError("max_span must be >= max_len")
        if self.max_step is not None and self.max_step < 2:
            raise InvalidInputError("max_step must be >= 2 so equal-length members can differ")

    @property
    def span_limit(self) -> int:
        return self.max_span if self.max_span is not None else 2 * (self.max_len - 1)

    @property
    def min_sequence_length(self) -> int:
        return 2 * self.max_len + 1


def _segments(length: int, cuts: Sequence[int]) -> list[tuple[int, int]]:
    """Inclusive cut-free index ranges; a cut at i separates frames i and i+1."""
    bounds = []
    start = 0
    for c in sorted(set(int(c) for c in cuts)):
        if 0 <= c < length - 1:
            bounds.append((start, c))
            start = c + 1
    bounds.append((start, length - 1))
    return bounds


@functools.lru_cache(maxsize=None)
def _n_paths(steps: int, total: int, max_step: int) -> int:
    """Ways to cover ``total`` frames in ``steps`` jumps of 1..max_step frames."""
    if steps == 0:
        return int(total == 0)
    return sum(_n_paths(steps - 1, total - s, max_step) for s in range(1, min(max_step, total) + 1))


def _bounded_path(rng, start: int, end: int, length: int, max_step: int) -> tuple[int, ...]:
    """Uniform over monotone paths whose jumps are all at most ``max_step``."""
    step = 1 if end > start else -1
    remaining, pos = abs(end - start), [start]
    for left in range(length - 1, 0, -1):
        weights = np.array([_n_paths(left - 1, remaining - s, max_step)
                            for s in range(1, min(max_step, remaining) + 1)], dtype=np.float64)
        jump = int(rng.choice(len(weights), p=weights / weights.sum())) + 1
        remaining -= jump
        pos.append(pos[-1] + step * jump)
    return tuple(pos)


def _monotone_path(rng, start: int, end: int, length: int, max_step: int | None = None) -> tuple[int, ...]:
    if max_step is not None:
        return _bounded_path(rng, start, end, length, max_step)
    step = 1 if end > start else -1
    interior = np.arange(start + step, end, step)
    chosen = np.sort(rng.choice(len(interior), size=length - 2, replace=False))
    return (start, *(int(interior[k]) for k in chosen), end)


def _distinct_paths(rng, start: int, end: int, len_a: int, len_b: int,
                    max_step: int | None = None) -> tuple[tuple[int, ...], tuple[int, ...]]:
    a = _monotone_path(rng, start, end, len_a, max_step)
    for _ in range(64):
        b = _monotone_path(rng, start, end, len_b, max_step)
        if b != a:
            return a, b
    raise AssertionError("window too small for distinct decompositions")  # excluded by span choice


def _loop_splits(extent: int, length: int, max_step: int) -> list[tuple[int, int, int]]:
    """Feasible (frames out, lowest turning offset, highest turning offset) for a bounded loop."""
    n_inner = length - 3
    splits = []
    for n_out in range(n_inner + 1):
        n_back = n_inner - n_out
        lo = max(n_out, n_back) + 1
        hi = min(extent, max_step * (min(n_out, n_back) + 1))
        if lo <= hi:
            splits.append((n_out, lo, hi))
    return splits


def _loop_path(rng, anchor: int, direction: int, extent: int, length: int,
               max_step: int | None = None) -> tuple[int, ...]:
    if max_step is not None:
        splits = _loop_splits(extent, length, max_step)
        n_out, lo, hi = splits[int(rng.integers(len(splits)))]
        peak_off = int(rng.integers(lo, hi + 1))
        out = _bounded_path(rng, 0, peak_off, n_out + 2, max_step)
        back = _bounded_path(rng, peak_off, 0, length - n_out - 1, max_step)
        return tuple(anchor + direction * o for o in (*out, *back[1:]))
    n_inner = length - 3
    # each leg can hold at most extent - 1 distinct interior offsets
    n_out = int(rng.integers(max(0, n_inner - (extent - 1)), min(n_inner, extent - 1) + 1))
    n_back = n_inner - n_out
    peak_off = int(rng.integers(max(n_out, n_back) + 1, extent + 1))
    inner = np.arange(1, peak_off)
    out = np.sort(rng.choice(inner, size=n_out, replace=False)) if n_out else np.array([], int)
    back = np.sort(rng.choice(inner, size=n_back, replace=False))[::-1] if n_back else np.array([], int)
    offsets = [0, *out.tolist(), peak_off, *back.tolist(), 0]
    return tuple(anchor + direction * int(o) for o in offsets)


def _draw_lengths(rng, cfg: SamplerConfig) -> np.ndarray:
    lens = rng.integers(cfg.min_len, cfg.max_len + 1, size=6)
    # a loop needs a turning frame; two 2-frame paths over one window coincide
    lens[4:] = np.maximum(lens[4:], 3)
    for k in (1, 3):
        if lens[k] == 2 and lens[k - 1] == 2:
            lens[k] = rng.integers(3, cfg.max_len + 1)
    return lens


def _bounded_span_ok(lens: np.ndarray, extent: int, max_step: int) -> bool:
    """Whether every member fits a window of ``extent`` frames with bounded jumps."""
    for a, b in ((lens[0], lens[1]), (lens[2], lens[3])):
        if min(_n_paths(int(a) - 1, extent, max_step), _n_paths(int(b) - 1, extent, max_step)) == 0:
            return False
        if a == b and _n_paths(int(a) - 1, extent, max_step) < 2:
            return False
    return all(_loop_splits(extent, int(n), max_step) for n in lens[4:])


def sample_tuple(
    seq: ImageSequence | int,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    cuts: Sequence[int] = (),
) -> RecompositionTuple | None:
    """Draw six recomposed members from one sequence.

    Returns None when no cut-free stretch of the sequence is long enough, which
    callers treat as "skip this sequence".
    """
    source = seq if isinstance(seq, ImageSequence) else None
    length = len(seq) if source is not None else int(seq)

    config = cfg.configs_enabled[int(rng.integers(len(cfg.configs_enabled)))]
    factor = 1 if config is SamplingConfig.SAME_START_SAME_SUB else 2
    if cfg.max_step is None:
        lens = _draw_lengths(rng, cfg)
        # a loop of length L needs an extent of at least (L - 1) / 2
        span_lo = max(int(lens[:4].max()), -(-int(lens[4:].max() - 1) // 2))
        segments = [(lo, hi) for lo, hi in _segments(length, cuts) if hi - lo >= factor * span_lo]
        if not segments:
            return None
        lo, hi = segments[int(rng.integers(len(segments)))]
        span_hi = min(cfg.span_limit, (hi - lo) // factor)
        d = int(rng.integers(span_lo, span_hi + 1))
    else:
        for _ in range(1000):
            lens = _draw_lengths(rng, cfg)
            spans = [e for e in range(1, cfg.span_limit + 1) if _bounded_span_ok(lens, e, cfg.max_step)]
            if spans:
                break
        else:  # pragma: no cover - equal 3-frame members always fit
            raise AssertionError("no member lengths fit the step bound")
        segments = [(lo, hi) for lo, hi in _segments(length, cuts) if hi - lo >= factor * spans[0]]
        if not segments:
            return None
        lo, hi = segments[int(rng.integers(len(segments)))]
        spans = [e for e in spans if e <= (hi - lo) // factor]
        d = spans[int(rng.integers(len(spans)))]
    first = int(rng.integers(lo, hi - factor * d + 1))

    if config is SamplingConfig.SAME_START_SAME_SUB:
        a = first
        f_ends, b_ends = (a, a + d), (a + d, a)
        loop_choices = [(a, 1)]
    elif config is SamplingConfig.SAME_START_ADJACENT:
        s = first + d
        f_ends, b_ends = (s, s + d), (s, s - d)
        loop_choices = [(s, 1), (s, -1)]
    else:
        a = first
        f_ends, b_ends = (a, a + d), (a + 2 * d, a + d)
        loop_choices = [(a, 1), (a + 2 * d, -1)]

    f1, f2 = _distinct_paths(rng, *f_ends, int(lens[0]), int(lens[1]), cfg.max_step)
    b1, b2 = _distinct_paths(rng, *b_ends, int(lens[2]), int(lens[3]), cfg.max_step)
    loops = []
    for length_i in lens[4:]:
        anchor, direction = loop_choices[int(rng.integers(len(loop_choices)))]
        loops.append(_loop_path(rng, anchor, direction, d, int(length_i), cfg.max_step))

    def mk(pos, ctype):
        return RecomposedSequence(pos, ctype, source)

    return RecompositionTuple(
        f1=mk(f1, CompositionType.FORWARD),
        f2=mk(f2, CompositionType.FORWARD),
        b1=mk(b1, CompositionType.BACKWARD),
        b2=mk(b2, CompositionType.BACKWARD),
        i1=mk(loops[0], CompositionType.IDENTITY),
        i2=mk(loops[1], CompositionType.IDENTITY),
        config=config,
        span=d,
    )


def enumerate_pairs(t: RecompositionTuple | None = None, negatives_per_tuple: int = 6) -> list[PairLabel]:
    """Positive pairs within each type and cross-type negatives.

    With 6 negatives only first-vs-second members are paired
    ({f1, b1, i1} x {f2, b2, i2}); with 12 every cross-type pair is used.
    The labels depend only on member names, so ``t`` may be omitted.
    """
    pairs = [PairLabel(f"{k}1", f"{k}2", Relation.POSITIVE) for k in "fbi"]
    if negatives_per_tuple == 6:
        for x in "fbi":
            for y in "fbi":
                if x != y:
                    pairs.append(PairLabel(f"{x}1", f"{y}2", Relation.NEGATIVE))
    elif negatives_per_tuple == 12:
        for i, x in enumerate("fbi"):
            for y in "fbi"[i + 1 :]:
                for u in "12":
                    for v in "12":
                        pairs.append(PairLabel(f"{x}{u}", f"{y}{v}", Relation.NEGATIVE))
    else:
        raise InvalidInputError("negatives_per_tuple must be 6 or 12")
    return pairs


def reverse(seq: RecomposedSequence) -> RecomposedSequence:
    return replace(seq, positions=seq.positions[::-1], ctype=_SWAP[seq.ctype])
