"""Domain types and dataset ingestion.

Narrated videos, closed-vocabulary taxonomies, evaluation queries, the binary
feature-file container and summary statistics. All types are immutable after
construction and safe to share across parallel readers.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class ParseError(ValueError):
    """Malformed annotation record; message carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class TaxonomyError(ValueError):
    """A verb/noun could not be resolved to exactly one cluster."""


class RangeError(ValueError):
    """A timestamp or interval falls outside its video."""


class ValidationError(ValueError):
    """A loaded dataset violates a structural invariant."""


class FeatureFileError(ValueError):
    """Base class for feature-container problems."""


class FeatureFormatError(FeatureFileError):
    """Bad magic, version or header fields."""


class FeatureDataError(FeatureFileError):
    """Payload contains NaN or Inf values."""


class FeatureLengthError(FeatureFileError):
    """Payload length disagrees with the header."""


# -- domain types -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Narration:
    """One narrated sentence with its rough timestamp inside a video."""

    sentence: str
    word_features: np.ndarray  # (L, d_t) float32
    timestamp: float  # seconds
    verb_cluster: int
    noun_cluster: int
    index: int  # ordinal position within the video, by timestamp


@dataclass(frozen=True, eq=False)
class NarratedVideo:
    """A video's identity, duration, feature matrix and ordered narrations."""

    video_id: str
    duration: float  # seconds
    feature_rate: float  # features per second; 0.0 until features attached
    features: np.ndarray | None  # (T, d_v) float32, or None before attach
    narrations: tuple[Narration, ...]

    @property
    def num_features(self) -> int:
        return 0 if self.features is None else self.features.shape[0]


@dataclass(frozen=True)
class Taxonomy:
    """Closed-vocabulary verb/noun clusters: surface word -> cluster id."""

    verb_clusters: Mapping[str, int]
    noun_clusters: Mapping[str, int]

    @classmethod
    def from_json(cls, path: str | Path) -> "Taxonomy":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict) or "verbs" not in raw or "nouns" not in raw:
            raise ParseError(f"taxonomy {path} must be a JSON object with 'verbs' and 'nouns' maps")
        return cls(verb_clusters=dict(raw["verbs"]), noun_clusters=dict(raw["nouns"]))

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"verbs": dict(self.verb_clusters), "nouns": dict(self.noun_clusters)}, fh, indent=1)

    def verb_cluster_of(self, word: str) -> int:
        try:
            return self.verb_clusters[word.lower()]
        except KeyError:
            raise TaxonomyError(f"verb {word!r} is not in the taxonomy") from None

    def noun_cluster_of(self, word: str) -> int:
        try:
            return self.noun_clusters[word.lower()]
        except KeyError:
            raise TaxonomyError(f"noun {word!r} is not in the taxonomy") from None

    def resolve_sentence(self, sentence: str) -> tuple[int, int]:
        """Find the main verb and noun clusters by scanning sentence tokens.

        Tokens and adjacent-token bigrams (for multi-word entries such as
        "trash can") are matched against the cluster maps; the first match of
        each kind wins.
        """
        tokens = sentence.lower().replace(",", " ").replace(".", " ").split()
        candidates = tokens + [" ".join(pair) for pair in zip(tokens, tokens[1:])]
        verb = next((self.verb_clusters[t] for t in candidates if t in self.verb_clusters), None)
        noun = next((self.noun_clusters[t] for t in candidates if t in self.noun_clusters), None)
        if verb is None or noun is None:
            missing = "verb" if verb is None else "noun"
            raise TaxonomyError(f"no {missing} of sentence {sentence!r} resolves to a cluster")
        return verb, noun


@dataclass(frozen=True, eq=False)
class EvalQuery:
    """A sentence with ground-truth extent, used only at evaluation time."""

    video_id: str
    sentence: str
    word_features: np.ndarray  # (L, d_t) float32
    gt_start: float  # seconds
    gt_end: float  # seconds
    verb_cluster: int
    noun_cluster: int


# -- binary feature container -------------------------------------------------

FEATURE_MAGIC = b"CLMF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIf")  # magic, version, T, d, feature_rate


def save_feature_matrix(path: str | Path, matrix: np.ndarray, feature_rate: float) -> None:
    """Write a (T, d) float32 matrix with its temporal rate to `path`."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise FeatureFormatError(f"expected a non-empty 2-D matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise FeatureDataError("refusing to write non-finite values")
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, matrix.shape[0], matrix.shape[1], feature_rate)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def load_feature_matrix(path: str | Path) -> tuple[np.ndarray, float]:
    """Read a feature file; returns (matrix (T, d) float32, feature_rate)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FeatureFormatError(f"{path}: file shorter than the header")
    magic, version, rows, cols, rate = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if rows < 1 or cols < 1:
        raise FeatureFormatError(f"{path}: header declares empty matrix {rows}x{cols}")
    payload = blob[_HEADER.size:]
    expected = rows * cols * 4
    if len(payload) != expected:
        raise FeatureLengthError(f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    if not np.all(np.isfinite(matrix)):
        raise FeatureDataError(f"{path}: payload contains NaN/Inf")
    return matrix, float(rate)


# -- annotation ingestion -----------------------------------------------------

_NARRATION_KEYS = {"video_id", "duration_s", "sentence", "timestamp_s", "verb", "noun", "word_features_path"}
_QUERY_KEYS = {"video_id", "sentence", "gt_start_s", "gt_end_s", "word_features_path"}


def _read_records(path: str | Path, required: set[str]) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=line_no) from None
            if not isinstance(record, dict):
                raise ParseError("record is not a JSON object", line=line_no)
            missing = required - record.keys()
            if missing:
                raise ParseError(f"missing keys {sorted(missing)}", line=line_no)
            yield line_no, record


class _WordFeatureCache:
    """Loads word-feature files relative to the annotation file, once each."""

    def __init__(self, base_dir: Path):
        self.base_dir = base_dir
        self._cache: dict[str, np.ndarray] = {}

    def get(self, rel_path: str, line_no: int) -> np.ndarray:
        if rel_path not in self._cache:
            matrix, _ = load_feature_matrix(self.base_dir / rel_path)
            if matrix.shape[0] < 1:
                raise ParseError(f"word features {rel_path!r} are empty", line=line_no)
            self._cache[rel_path] = matrix
        return self._cache[rel_path]


def load_annotations(path: str | Path, taxonomy: Taxonomy) -> list[NarratedVideo]:
    """Load narration records, grouped per video and sorted by timestamp.

    Feature matrices are not attached here; see `attach_features` /
    `load_dataset`. Raises ParseError, TaxonomyError or RangeError on bad
    records.
    """
    path = Path(path)
    words = _WordFeatureCache(path.parent)
    durations: dict[str, float] = {}
    pending: dict[str, list[tuple[float, int, dict]]] = {}
    for line_no, record in _read_records(path, _NARRATION_KEYS):
        vid = str(record["video_id"])
        duration = float(record["duration_s"])
        timestamp = float(record["timestamp_s"])
        if duration <= 0:
            raise ParseError(f"non-positive duration {duration}", line=line_no)
        if vid in durations and durations[vid] != duration:
            raise ParseError(f"video {vid!r} has conflicting durations", line=line_no)
        durations[vid] = duration
        if timestamp < 0 or timestamp > duration:
            raise RangeError(f"line {line_no}: timestamp {timestamp} s outside video of {duration} s")
        pending.setdefault(vid, []).append((timestamp, line_no, record))

    videos: list[NarratedVideo] = []
    for vid, rows in pending.items():
        rows.sort(key=lambda item: item[0])
        narrations = []
        for idx, (timestamp, line_no, record) in enumerate(rows):
            narrations.append(Narration(
                sentence=str(record["sentence"]),
                word_features=words.get(str(record["word_features_path"]), line_no),
                timestamp=timestamp,
                verb_cluster=taxonomy.verb_cluster_of(str(record["verb"])),
                noun_cluster=taxonomy.noun_cluster_of(str(record["noun"])),
                index=idx,
            ))
        videos.append(NarratedVideo(
            video_id=vid,
            duration=durations[vid],
            feature_rate=0.0,
            features=None,
            narrations=tuple(narrations),
        ))
    return videos


def load_eval_queries(path: str | Path, taxonomy: Taxonomy) -> list[EvalQuery]:
    """Load evaluation query records; clusters are resolved from the sentence."""
    path = Path(path)
    words = _WordFeatureCache(path.parent)
    queries: list[EvalQuery] = []
    for line_no, record in _read_records(path, _QUERY_KEYS):
        start, end = float(record["gt_start_s"]), float(record["gt_end_s"])
        if not (0 <= start < end):
            raise RangeError(f"line {line_no}: bad ground-truth interval [{start}, {end}]")
        verb, noun = taxonomy.resolve_sentence(str(record["sentence"]))
        queries.append(EvalQuery(
            video_id=str(record["video_id"]),
            sentence=str(record["sentence"]),
            word_features=words.get(str(record["word_features_path"]), line_no),
            gt_start=start,
            gt_end=end,
            verb_cluster=verb,
            noun_cluster=noun,
        ))
    return queries


def attach_features(video: NarratedVideo, features: np.ndarray, feature_rate: float) -> NarratedVideo:
    """Attach a loaded feature matrix, validating it against the duration."""
    rows = features.shape[0]
    expected = round(video.duration * feature_rate)
    if abs(rows - expected) > 1:
        raise ValidationError(
            f"video {video.video_id!r}: {rows} features but duration {video.duration} s "
            f"at {feature_rate}/s implies {expected}")
    return replace(video, features=features, feature_rate=feature_rate)


def load_dataset(data_dir: str | Path, split: str, taxonomy: Taxonomy | None = None) -> list[NarratedVideo]:
    """Load one split's narrations and attach per-video feature matrices."""
    data_dir = Path(data_dir)
    if taxonomy is None:
        taxonomy = Taxonomy.from_json(data_dir / "taxonomy.json")
    videos = load_annotations(data_dir / f"{split}_narrations.jsonl", taxonomy)
    attached = []
    for video in videos:
        matrix, rate = load_feature_matrix(data_dir / "features" / f"{video.video_id}.clmf")
        attached.append(attach_features(video, matrix, rate))
    return attached


def load_queries(data_dir: str | Path, split: str, taxonomy: Taxonomy | None = None) -> list[EvalQuery]:
    data_dir = Path(data_dir)
    if taxonomy is None:
        taxonomy = Taxonomy.from_json(data_dir / "taxonomy.json")
    return load_eval_queries(data_dir / f"{split}_queries.jsonl", taxonomy)


# -- semantics ---------------------------------------------------------------


def semantically_distinct(a: Narration, b: Narration, taxonomy: Taxonomy | None = None) -> bool:
    """True iff the two sentences differ in verb cluster or noun cluster.

    Both narrations must already be resolved against the taxonomy; the
    argument is accepted for API symmetry with the loaders.
    """
    return a.verb_cluster != b.verb_cluster or a.noun_cluster != b.noun_cluster


def dedup_eval_queries(queries: Sequence[EvalQuery], taxonomy: Taxonomy | None = None) -> list[EvalQuery]:
    """Keep, per video, only the earliest query of each (verb, noun) pair.

    Output lists videos in order of first appearance, each video's kept
    queries sorted by ground-truth start. Idempotent.
    """
    by_video: dict[str, list[EvalQuery]] = {}
    for query in queries:
        by_video.setdefault(query.video_id, []).append(query)
    kept: list[EvalQuery] = []
    for video_id, group in by_video.items():
        seen: set[tuple[int, int]] = set()
        for query in sorted(group, key=lambda q: q.gt_start):
            key = (query.verb_cluster, query.noun_cluster)
            if key not in seen:
                seen.add(key)
                kept.append(query)
    return kept


# -- statistics ----------------------------------------------------------------


@dataclass(frozen=True)
class StatsReport:
    """Corpus-level statistics in the style of grounding-dataset tables."""

    num_videos: int
    num_narrations: int
    num_queries: int
    total_video_duration_s: float
    avg_video_duration_s: float
    avg_moment_duration_s: float
    narrations_per_video: float
    avg_coverage_pct: float  # mean over queries of moment/video duration, in %

    def to_text(self) -> str:
        lines = [
            f"videos                 : {self.num_videos}",
            f"narrations             : {self.num_narrations}",
            f"eval queries           : {self.num_queries}",
            f"total video duration   : {self.total_video_duration_s / 3600:.2f} h",
            f"avg video duration     : {self.avg_video_duration_s / 60:.1f} min",
            f"avg moment duration    : {self.avg_moment_duration_s:.1f} s",
            f"narrations per video   : {self.narrations_per_video:.1f}",
            f"avg coverage           : {self.avg_coverage_pct:.2f}%",
        ]
        return "\n".join(lines)


def dataset_stats(videos: Sequence[NarratedVideo], queries: Sequence[EvalQuery]) -> StatsReport:
    """Summarize durations, annotation density and ground-truth coverage."""
    if not videos:
        raise ValidationError("dataset_stats requires at least one video")
    if not queries:
        raise ValidationError("dataset_stats requires at least one query")
    durations = {v.video_id: v.duration for v in videos}
    for query in queries:
        if query.video_id not in durations:
            raise ValidationError(f"query references unknown video {query.video_id!r}")
    moments = [q.gt_end - q.gt_start for q in queries]
    coverage = [(q.gt_end - q.gt_start) / durations[q.video_id] for q in queries]
    total = sum(v.duration for v in videos)
    narration_count = sum(len(v.narrations) for v in videos)
    return StatsReport(
        num_videos=len(videos),
        num_narrations=narration_count,
        num_queries=len(queries),
        total_video_duration_s=total,
        avg_video_duration_s=total / len(videos),
        avg_moment_duration_s=float(np.mean(moments)),
        narrations_per_video=narration_count / len(videos),
        avg_coverage_pct=100.0 * float(np.mean(coverage)),
    )
