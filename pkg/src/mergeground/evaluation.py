"""Full-video grounding at test time and the retrieval metrics.

Prediction vectors are min-max normalized, thresholded into contiguous
segments, ranked by raw peak value, and scored with temporal IoU against
ground truth as Recall@1 at several overlap thresholds plus their mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import EvalQuery, NarratedVideo

DEFAULT_THETAS = (0.1, 0.3, 0.5)
_DEGENERATE_SPAN = 1e-9


@dataclass(frozen=True)
class Segment:
    """One predicted grounding: [start, end) seconds with a confidence score."""

    start: float
    end: float
    score: float


@dataclass(frozen=True, eq=False)
class GroundingPrediction:
    """Ranked, non-overlapping segments for one query; may be empty."""

    segments: tuple[Segment, ...]
    query: EvalQuery | None = None

    def top(self, k: int) -> tuple[Segment, ...]:
        return self.segments[:k]


@dataclass(frozen=True)
class EvalReport:
    """Recall@1 percentages per IoU threshold, their mean, and per-query IoU."""

    r1: Mapping[float, float]
    mr1: float
    per_query_iou: tuple[float, ...] = field(default=())


def normalize_predictions(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a near-constant vector maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size < 1:
        raise ValueError("predictions must be a non-empty 1-D vector")
    span = raw.max() - raw.min()
    if span < _DEGENERATE_SPAN:
        return np.zeros_like(raw)
    return (raw - raw.min()) / span


def extract_segments(normed: np.ndarray, raw: np.ndarray, epsilon: float,
                     feature_rate: float, query: EvalQuery | None = None) -> GroundingPrediction:
    """Maximal runs of normed > epsilon, as seconds, ranked by raw peak value.

    Each feature index spans its full temporal stride, so a run over indices
    [a, b] becomes [a/rate, (b+1)/rate). Ties rank the earlier segment first.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    normed = np.asarray(normed, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    if normed.shape != raw.shape:
        raise ValueError("normalized and raw vectors disagree in shape")
    above = normed > epsilon
    segments: list[Segment] = []
    start = None
    for idx, hot in enumerate(above):
        if hot and start is None:
            start = idx
        elif not hot and start is not None:
            segments.append(_run_to_segment(raw, start, idx - 1, feature_rate))
            start = None
    if start is not None:
        segments.append(_run_to_segment(raw, start, len(above) - 1, feature_rate))
    segments.sort(key=lambda s: (-s.score, s.start))
    return GroundingPrediction(segments=tuple(segments), query=query)


def _run_to_segment(raw: np.ndarray, first: int, last: int, rate: float) -> Segment:
    return Segment(start=first / rate, end=(last + 1) / rate,
                   score=float(raw[first:last + 1].max()))


def iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal intersection over union of two [start, end) intervals."""
    (a0, a1), (b0, b1) = a, b
    if not (a0 < a1 and b0 < b1):
        raise ValueError("intervals must have start < end")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    if inter == 0.0:
        return 0.0
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def recall_at_k(predictions: Sequence[GroundingPrediction], queries: Sequence[EvalQuery],
                theta: float, k: int = 1) -> float:
    """Percentage of queries whose top-k segments contain one with IoU >= theta."""
    if len(predictions) != len(queries):
        raise ValueError("one prediction list is required per query")
    if not queries:
        raise ValueError("recall over an empty query set is undefined")
    hits = 0
    for prediction, query in zip(predictions, queries):
        gt = (query.gt_start, query.gt_end)
        if any(iou((s.start, s.end), gt) >= theta for s in prediction.top(k)):
            hits += 1
    return 100.0 * hits / len(queries)


def mean_r1(r1: Mapping[float, float]) -> float:
    """Arithmetic mean of the per-threshold Recall@1 percentages."""
    values = list(r1.values())
    if not values:
        raise ValueError("mean over no thresholds is undefined")
    return float(np.mean(values))


def random_baseline(duration: float, rng: np.random.Generator) -> GroundingPrediction:
    """A single segment between two independent uniform draws over the video."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    while True:
        a, b = rng.uniform(0.0, duration, size=2)
        if a != b:
            break
    return GroundingPrediction(segments=(Segment(start=min(a, b), end=max(a, b), score=1.0),))


def ground_query(model, video: NarratedVideo, word_features: np.ndarray,
                 epsilon: float, query: EvalQuery | None = None) -> GroundingPrediction:
    """Grounding over a full untrimmed video: predict, normalize, threshold."""
    if video.features is None:
        raise ValueError(f"video {video.video_id!r} has no features attached")
    raw = model.predict(video.features, word_features)
    normed = normalize_predictions(raw)
    return extract_segments(normed, raw, epsilon, video.feature_rate, query=query)


def evaluate_queries(model, videos_by_id: Mapping[str, NarratedVideo],
                     queries: Sequence[EvalQuery], epsilon: float,
                     thetas: Sequence[float] = DEFAULT_THETAS) -> EvalReport:
    """Run grounding for every query and report R@1 per theta plus mR@1."""
    predictions = [ground_query(model, videos_by_id[q.video_id], q.word_features, epsilon, q)
                   for q in queries]
    return score_predictions(predictions, queries, thetas)


def score_predictions(predictions: Sequence[GroundingPrediction], queries: Sequence[EvalQuery],
                      thetas: Sequence[float] = DEFAULT_THETAS) -> EvalReport:
    r1 = {theta: recall_at_k(predictions, queries, theta, k=1) for theta in thetas}
    per_query = []
    for prediction, query in zip(predictions, queries):
        gt = (query.gt_start, query.gt_end)
        top = prediction.top(1)
        per_query.append(iou((top[0].start, top[0].end), gt) if top else 0.0)
    return EvalReport(r1=r1, mr1=mean_r1(r1), per_query_iou=tuple(per_query))


def threshold_sweep(model, videos_by_id: Mapping[str, NarratedVideo],
                    queries: Sequence[EvalQuery], epsilons: Sequence[float],
                    thetas: Sequence[float] = DEFAULT_THETAS) -> list[tuple[float, EvalReport]]:
    """Evaluate a list of thresholds, computing each model forward pass once."""
    for epsilon in epsilons:
        if not 0.0 < epsilon < 1.0:
            raise ValueError(f"epsilon {epsilon} outside (0, 1)")
    cached = []
    for query in queries:
        video = videos_by_id[query.video_id]
        if video.features is None:
            raise ValueError(f"video {video.video_id!r} has no features attached")
        raw = model.predict(video.features, query.word_features)
        cached.append((raw, normalize_predictions(raw), video.feature_rate))
    results = []
    for epsilon in epsilons:
        predictions = [extract_segments(normed, raw, epsilon, rate, query=query)
                       for (raw, normed, rate), query in zip(cached, queries)]
        results.append((epsilon, score_predictions(predictions, queries, thetas)))
    return results


# -- report files -----------------------------------------------------------------


def write_eval_report_csv(path: str | Path, report: EvalReport) -> None:
    thetas = sorted(report.r1)
    header = ",".join([_theta_column(theta) for theta in thetas] + ["mr1"])
    values = ",".join([f"{report.r1[theta]:.6f}" for theta in thetas] + [f"{report.mr1:.6f}"])
    Path(path).write_text(header + "\n" + values + "\n", encoding="utf-8")


def _theta_column(theta: float) -> str:
    # 0.1 -> theta_01, 0.3 -> theta_03, 0.5 -> theta_05
    return f"theta_{theta:.1f}".replace("0.", "0")


def write_predictions_jsonl(path: str | Path, predictions: Sequence[GroundingPrediction],
                            top_k: int = 5) -> None:
    """One JSON record per query with its top-k segments."""
    with open(path, "w", encoding="utf-8") as fh:
        for prediction in predictions:
            query = prediction.query
            record = {
                "video_id": query.video_id if query else None,
                "sentence": query.sentence if query else None,
                "gt": [query.gt_start, query.gt_end] if query else None,
                "segments": [[round(s.start, 6), round(s.end, 6), round(s.score, 6)]
                             for s in prediction.top(top_k)],
            }
            fh.write(json.dumps(record) + "\n")


def write_sweep_csv(path: str | Path, results: Sequence[tuple[float, EvalReport]]) -> None:
    if not results:
        raise ValueError("sweep produced no rows")
    thetas = sorted(results[0][1].r1)
    lines = [",".join(["epsilon"] + [_theta_column(t) for t in thetas] + ["mr1"])]
    for epsilon, report in results:
        lines.append(",".join([f"{epsilon:.6f}"] +
                              [f"{report.r1[t]:.6f}" for t in thetas] +
                              [f"{report.mr1:.6f}"]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
