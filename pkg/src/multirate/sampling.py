"""Clip index samplers and segment partitioning.

Three clip samplers are provided: consecutive frames, fixed temporal stride,
and random temporal skipping where every step independently draws an integer
stride from {0, ..., max_stride}. A zero stride repeats a frame, which is
deliberate: it lets the random sampler cover the no-motion case.

All samplers are pure functions over an explicitly passed
numpy.random.Generator; callers derive per-video streams with derive_rng so
results are independent of threading and evaluation order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Rejection budget when a drawn stride pattern does not fit the video;
# afterwards we fall back to all-zero strides, which always fit.
_MAX_REDRAWS = 100


@dataclass(frozen=True)
class SamplerConfig:
    clip_len: int
    max_stride: int
    seed: int = 0

    def __post_init__(self):
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")
        if self.max_stride < 0:
            raise ValueError("max_stride must be >= 0")


@dataclass(frozen=True)
class SegmentLayout:
    """Contiguous half-open index ranges covering [0, T)."""

    segment_count: int
    boundaries: tuple

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(map(tuple, self.boundaries)))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic per-(video, epoch, ...) RNG stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def sample_consecutive(T: int, t: int, L: int) -> np.ndarray:
    """Indices [t, t+1, ..., t+L-1]."""
    if t < 0 or L < 1 or t + L > T:
        raise ValueError(f"consecutive clip (t={t}, L={L}) exceeds video of {T} frames")
    return np.arange(t, t + L, dtype=np.int64)


def sample_fixed_stride(T: int, t: int, L: int, tau: int) -> np.ndarray:
    """Indices [t, t+tau, ..., t+(L-1)*tau]."""
    if tau < 0:
        raise ValueError("stride must be >= 0")
    if t < 0 or L < 1 or t + (L - 1) * tau > T - 1:
        raise ValueError(
            f"strided clip (t={t}, L={L}, tau={tau}) exceeds video of {T} frames")
    return t + tau * np.arange(L, dtype=np.int64)


def _random_skip_in_range(lo: int, hi: int, L: int, max_stride: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Random-skip clip confined to [lo, hi)."""
    span_budget = hi - lo - 1
    strides = None
    for _ in range(_MAX_REDRAWS):
        cand = rng.integers(0, max_stride + 1, size=L - 1)
        if int(cand.sum()) <= span_budget:
            strides = cand
            break
    if strides is None:
        strides = np.zeros(L - 1, dtype=np.int64)
    span = int(strides.sum())
    start = lo + int(rng.integers(0, span_budget - span + 1))
    idx = np.empty(L, dtype=np.int64)
    idx[0] = start
    if L > 1:
        np.cumsum(strides, out=idx[1:])
        idx[1:] += start
    return idx


def sample_rts(T: int, L: int, max_stride: int, rng: np.random.Generator) -> np.ndarray:
    """Random temporal skipping: L indices with per-step strides drawn
    uniformly from {0, ..., max_stride}.

    Strides are drawn first; the start is then drawn uniformly over the
    positions where the realized span fits. Patterns too long for the video
    are redrawn (preserving the uniform stride law on long videos) with an
    all-zero fallback so the call always terminates.
    """
    if L < 1:
        raise ValueError("clip length must be >= 1")
    if T < L:
        raise ValueError(f"video of {T} frames cannot host a clip of {L}")
    if max_stride < 0:
        raise ValueError("max_stride must be >= 0")
    return _random_skip_in_range(0, T, L, max_stride, rng)


def partition_segments(T: int, S: int) -> SegmentLayout:
    """S contiguous ranges of size ceil(T/S) or floor(T/S), larger ones first."""
    if S < 1:
        raise ValueError("segment count must be >= 1")
    if T < S:
        raise ValueError(f"cannot split {T} frames into {S} non-empty segments")
    base, extra = divmod(T, S)
    bounds = []
    lo = 0
    for s in range(S):
        hi = lo + base + (1 if s < extra else 0)
        bounds.append((lo, hi))
        lo = hi
    return SegmentLayout(S, tuple(bounds))


def sample_segment_clips(T: int, S: int, cfg: SamplerConfig,
                         rng: np.random.Generator) -> list:
    """One random-skip clip per segment, indices confined to the segment."""
    layout = partition_segments(T, S)
    clips = []
    for lo, hi in layout.boundaries:
        if hi - lo < cfg.clip_len:
            raise ValueError(
                f"segment [{lo}, {hi}) shorter than clip length {cfg.clip_len}")
        clips.append(_random_skip_in_range(lo, hi, cfg.clip_len, cfg.max_stride, rng))
    return clips


def eval_sample_indices(T: int, K: int) -> np.ndarray:
    """K evenly spaced anchors over [0, T-1], rounded half-up.

    K=1 picks the middle frame; for T >= K the anchors start at 0 and end at
    T-1. Short videos yield repeated indices.
    """
    if T < 1 or K < 1:
        raise ValueError("T and K must be >= 1")
    if K == 1:
        positions = np.array([(T - 1) / 2.0])
    else:
        positions = np.arange(K) * ((T - 1) / (K - 1))
    return np.floor(positions + 0.5).astype(np.int64)
