"""Construction of merged training episodes.

Sentence triplets from one video, rough clip bounds from neighbouring
timestamps, a random rectangular template, and the slot-level merge of two
clips into one fixed-length segment with complementary binary supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Narration, NarratedVideo, semantically_distinct


class DegenerateClipError(ValueError):
    """Clip bounds span less than one feature at the video's rate."""


class NoValidTripletError(RuntimeError):
    """Rejection sampling found no admissible sentence triplet."""


class InsufficientBackgroundError(ValueError):
    """A background episode has no video content outside the clip bounds."""


@dataclass(frozen=True)
class ClipBounds:
    """Rough temporal extent of a clip, anchored at one narration timestamp."""

    lo: float  # seconds
    hi: float  # seconds
    anchor: float  # the narration timestamp, lo <= anchor <= hi


@dataclass(frozen=True, eq=False)
class MergeTemplate:
    """A rectangular window over slot centres: y[m] = 1 iff alpha <= (m+0.5)/M < alpha+beta."""

    alpha: float
    beta: float
    y: np.ndarray  # (slots,) int8
    slots: int


@dataclass(frozen=True, eq=False)
class MergedEpisode:
    """A fixed-length training segment built from two clips of one video.

    `y_i` marks the slots filled from the first clip; `y_j` is its complement.
    `beta` is the effective first-clip fraction, sum(y_i)/slots. `sentences`
    holds word-feature matrices for (c_i, c_j, c_k); entries may be None in
    background mode. `src_rows[m] = (clip, row)` records the provenance of
    every slot (clip 0 = first clip, 1 = second clip / background).
    """

    features: np.ndarray  # (slots, d_v)
    y_i: np.ndarray  # (slots,) int8
    y_j: np.ndarray  # (slots,) int8
    beta: float
    sentences: tuple[np.ndarray | None, np.ndarray | None, np.ndarray | None]
    alpha: float | None = None
    video_id: str | None = None
    indices: tuple[int | None, int | None, int | None] | None = None
    merged: bool = True
    src_rows: np.ndarray | None = None  # (slots, 2) int


# -- clip bounds ---------------------------------------------------------------


def clip_bounds(video: NarratedVideo, i: int) -> ClipBounds:
    """Bound clip i by its neighbouring narration timestamps.

    The first/last narration falls back to the video start/end. Raises
    DegenerateClipError when the bounds span less than one feature.
    """
    narrations = video.narrations
    if not 0 <= i < len(narrations):
        raise IndexError(f"narration index {i} out of range")
    lo = narrations[i - 1].timestamp if i > 0 else 0.0
    hi = narrations[i + 1].timestamp if i < len(narrations) - 1 else video.duration
    lo = min(max(lo, 0.0), video.duration)
    hi = min(max(hi, 0.0), video.duration)
    if (hi - lo) * video.feature_rate < 1.0:
        raise DegenerateClipError(
            f"bounds [{lo:.2f}, {hi:.2f}] s span under one feature at {video.feature_rate}/s")
    return ClipBounds(lo=lo, hi=hi, anchor=narrations[i].timestamp)


def clip_feature_rows(video: NarratedVideo, bounds: ClipBounds) -> np.ndarray:
    """Slice the video's feature rows covered by `bounds` (at least one row)."""
    total = video.num_features
    start = min(int(math.floor(bounds.lo * video.feature_rate)), total - 1)
    end = min(int(math.ceil(bounds.hi * video.feature_rate)), total)
    end = max(end, start + 1)
    return video.features[start:end]


# -- triplet sampling ------------------------------------------------------------


def sample_triplet(video: NarratedVideo, rng: np.random.Generator,
                   min_sep: int = 3, max_attempts: int = 1000) -> tuple[int, int, int]:
    """Sample narration indices (i, j, k), uniform over admissible triples.

    Requires |i - j| >= min_sep and pairwise semantic distinctness of the
    three sentences; k only needs to differ from i and j in index.
    """
    narrations = video.narrations
    n = len(narrations)
    if n < 3:
        raise NoValidTripletError(f"video {video.video_id!r} has only {n} narrations")
    for _ in range(max_attempts):
        i, j, k = rng.integers(0, n, size=3)
        if abs(i - j) < min_sep or k == i or k == j:
            continue
        if not _pairwise_distinct(narrations[i], narrations[j], narrations[k]):
            continue
        return int(i), int(j), int(k)
    raise NoValidTripletError(
        f"no admissible triplet in video {video.video_id!r} after {max_attempts} attempts")


def _pairwise_distinct(a: Narration, b: Narration, c: Narration) -> bool:
    return (semantically_distinct(a, b) and semantically_distinct(a, c)
            and semantically_distinct(b, c))


# -- merge templates ------------------------------------------------------------


def make_template(alpha: float, beta: float, slots: int) -> MergeTemplate:
    """Build the template for given (alpha, beta); both clips must get a slot."""
    if slots < 2:
        raise ValueError("a merge template needs at least 2 slots")
    centres = (np.arange(slots) + 0.5) / slots
    y = ((alpha <= centres) & (centres < alpha + beta)).astype(np.int8)
    filled = int(y.sum())
    if not 1 <= filled <= slots - 1:
        raise ValueError(f"template (alpha={alpha}, beta={beta}) fills {filled}/{slots} slots")
    return MergeTemplate(alpha=float(alpha), beta=float(beta), y=y, slots=slots)


def sample_template(slots: int, rng: np.random.Generator) -> MergeTemplate:
    """Draw alpha ~ U[0,1], beta ~ U(0, 1-alpha]; resample until both clips appear."""
    if slots < 2:
        raise ValueError("a merge template needs at least 2 slots")
    while True:
        alpha = rng.uniform(0.0, 1.0)
        beta = (1.0 - alpha) * rng.uniform(0.0, 1.0)
        try:
            return make_template(alpha, beta, slots)
        except ValueError:
            continue


# -- resampling and merging -------------------------------------------------------


def resample_features(clip: np.ndarray, k: int) -> np.ndarray:
    """Resample a (T, d) clip to k rows by nearest source index.

    Output row j takes clip row min(T-1, floor((j+0.5)*T/k)); order preserving
    and interpolation free, so every output row is a real feature vector.
    """
    if clip.ndim != 2 or clip.shape[0] < 1:
        raise ValueError("cannot resample an empty clip")
    if k < 1:
        raise ValueError("target row count must be >= 1")
    rows = source_rows(clip.shape[0], k)
    return clip[rows]


def source_rows(total: int, k: int) -> np.ndarray:
    """Source indices used by `resample_features`, in exact integer arithmetic."""
    rows = ((2 * np.arange(k, dtype=np.int64) + 1) * total) // (2 * k)
    return np.minimum(rows, total - 1)


def build_merged_segment(
    clip_i: np.ndarray,
    clip_j: np.ndarray,
    template: MergeTemplate,
    sentences: tuple[np.ndarray | None, np.ndarray | None, np.ndarray | None],
) -> MergedEpisode:
    """Merge two clips into the template's slots.

    The first clip fills the template's window; the second is resampled once
    over the remaining slots and split around the window, its leading portion
    before the window and the trailing portion after.
    """
    if clip_i.shape[1] != clip_j.shape[1]:
        raise ValueError("clips disagree on feature dimension")
    y = template.y
    slots = template.slots
    filled = int(y.sum())
    start = int(np.argmax(y == 1))
    n_lead = start
    n_trail = slots - filled - n_lead

    inside = resample_features(clip_i, filled)
    outside = resample_features(clip_j, n_lead + n_trail)

    features = np.empty((slots, clip_i.shape[1]), dtype=np.result_type(clip_i, clip_j))
    features[:n_lead] = outside[:n_lead]
    features[start:start + filled] = inside
    if n_trail:
        features[start + filled:] = outside[n_lead:]

    src = np.empty((slots, 2), dtype=np.int64)
    rows_i = source_rows(clip_i.shape[0], filled)
    rows_j = source_rows(clip_j.shape[0], n_lead + n_trail)
    src[:n_lead] = np.stack([np.ones(n_lead, dtype=np.int64), rows_j[:n_lead]], axis=1)
    src[start:start + filled] = np.stack([np.zeros(filled, dtype=np.int64), rows_i], axis=1)
    if n_trail:
        src[start + filled:] = np.stack([np.ones(n_trail, dtype=np.int64), rows_j[n_lead:]], axis=1)

    return MergedEpisode(
        features=features,
        y_i=y.copy(),
        y_j=(1 - y).astype(np.int8),
        beta=filled / slots,
        sentences=sentences,
        alpha=template.alpha,
        src_rows=src,
    )


# -- background (no-merge) episodes ---------------------------------------------


def build_background_episode(
    video: NarratedVideo,
    i: int,
    slots: int,
    rng: np.random.Generator,
    negative: Narration | None = None,
    background_range: tuple[float, float] = (0.25, 0.75),
    max_attempts: int = 1000,
) -> MergedEpisode:
    """Place clip i among background features drawn from the same video.

    The background fraction is uniform over `background_range`; background
    rows come only from outside the clip's bounds. If `negative` is None, a
    semantically distinct narration from the same video is sampled for c_k.
    """
    bounds = clip_bounds(video, i)
    total = video.num_features
    lo_idx = min(int(math.floor(bounds.lo * video.feature_rate)), total - 1)
    hi_idx = max(min(int(math.ceil(bounds.hi * video.feature_rate)), total), lo_idx + 1)
    clip = video.features[lo_idx:hi_idx]
    before = video.features[:lo_idx]
    after = video.features[hi_idx:]
    if before.shape[0] == 0 and after.shape[0] == 0:
        raise InsufficientBackgroundError(
            f"video {video.video_id!r} has no features outside clip bounds")

    fraction = rng.uniform(*background_range)
    n_bg = int(np.clip(round(fraction * slots), 1, slots - 1))
    n_clip = slots - n_bg
    n_lead = int(round(rng.uniform(0.0, 1.0) * n_bg))
    if before.shape[0] == 0:
        n_lead = 0
    elif after.shape[0] == 0:
        n_lead = n_bg
    n_trail = n_bg - n_lead

    parts = []
    src_parts = []
    if n_lead:
        rows = source_rows(before.shape[0], n_lead)
        parts.append(before[rows])
        src_parts.append(np.stack([np.ones(n_lead, dtype=np.int64), rows], axis=1))
    rows = source_rows(clip.shape[0], n_clip)
    parts.append(clip[rows])
    src_parts.append(np.stack([np.zeros(n_clip, dtype=np.int64), rows + lo_idx], axis=1))
    if n_trail:
        rows = source_rows(after.shape[0], n_trail)
        parts.append(after[rows])
        src_parts.append(np.stack([np.ones(n_trail, dtype=np.int64), rows + hi_idx], axis=1))

    y_i = np.zeros(slots, dtype=np.int8)
    y_i[n_lead:n_lead + n_clip] = 1

    if negative is None:
        negative = _sample_background_negative(video, i, rng, max_attempts)

    return MergedEpisode(
        features=np.concatenate(parts, axis=0),
        y_i=y_i,
        y_j=(1 - y_i).astype(np.int8),
        beta=n_clip / slots,
        sentences=(video.narrations[i].word_features, None, negative.word_features),
        alpha=n_lead / slots,
        video_id=video.video_id,
        indices=(i, None, negative.index if negative.index < len(video.narrations) else None),
        merged=False,
        src_rows=np.concatenate(src_parts, axis=0),
    )


def _sample_background_negative(video: NarratedVideo, i: int, rng: np.random.Generator,
                                max_attempts: int) -> Narration:
    n = len(video.narrations)
    anchor = video.narrations[i]
    for _ in range(max_attempts):
        k = int(rng.integers(0, n))
        if k != i and semantically_distinct(anchor, video.narrations[k]):
            return video.narrations[k]
    raise NoValidTripletError(
        f"no distinct negative for narration {i} of video {video.video_id!r}")
