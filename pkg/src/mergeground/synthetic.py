"""Deterministic synthetic narrated-video worlds with planted ground truth.

Videos alternate background and short action spans. Visual features inside an
action are the sum of a verb prototype, a noun prototype and a per-video
ambient vector, plus Gaussian noise; background spans use a background
prototype instead. Sentences are short token lists (filler words plus one
verb and one noun surface form) with per-word feature vectors derived from
per-cluster text prototypes. Narration timestamps sit at the action midpoint
plus uniform jitter, so they may fall outside the true extent.

Worlds are generated so that grounding is solvable from per-feature content
alone, at the low ground-truth coverage typical of long egocentric video.
Repeated action types within one video are avoided while unused (verb, noun)
pairs remain, so evaluation queries stay unambiguous.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (EvalQuery, Narration, NarratedVideo, Taxonomy, dedup_eval_queries,
                   save_feature_matrix)

_FILLER_WORDS = ("person", "the", "then", "now")
_WORD_FORM_SCALE = 0.1  # spread of surface-word vectors around their cluster prototype


@dataclass(frozen=True)
class WorldConfig:
    """Generator settings; the defaults give sub-2% ground-truth coverage."""

    num_videos: int = 10
    video_duration_s: float = 180.0
    feature_rate: float = 1.87
    d_v: int = 24
    d_t: int = 16
    verb_cluster_count: int = 6
    noun_cluster_count: int = 6
    words_per_cluster: int = 2
    verbs_per_video: int = 4  # 0 means every video uses all verb clusters
    nouns_per_video: int = 5  # 0 means every video uses all noun clusters
    action_duration_range: tuple[float, float] = (2.0, 4.0)
    gap_range: tuple[float, float] = (5.0, 9.0)
    verb_block_range: tuple[int, int] = (2, 4)  # consecutive actions sharing a verb
    timestamp_jitter_s: float = 0.5
    noise_sigma: float = 0.1
    ambient_scale: float = 0.5
    drift_scale: float = 0.35  # slowly varying within-video appearance change
    drift_window_s: float = 12.0
    seed: int = 0

    def validate(self) -> "WorldConfig":
        if self.num_videos < 1 or self.video_duration_s <= 0 or self.feature_rate <= 0:
            raise ValueError("need at least one video with positive duration and rate")
        if min(self.d_v, self.d_t) < 1 or self.words_per_cluster < 1:
            raise ValueError("feature widths and words per cluster must be positive")
        if self.verb_cluster_count < 2 or self.noun_cluster_count < 2:
            raise ValueError("at least two verb and two noun clusters are required")
        lo_a, hi_a = self.action_duration_range
        lo_g, hi_g = self.gap_range
        if not (0 < lo_a <= hi_a and 0 < lo_g <= hi_g):
            raise ValueError("action and gap ranges must be positive and ordered")
        if self.timestamp_jitter_s < 0 or self.noise_sigma < 0 or self.ambient_scale < 0:
            raise ValueError("jitter, noise and ambient scale must be non-negative")
        lo_b, hi_b = self.verb_block_range
        if not 1 <= lo_b <= hi_b:
            raise ValueError("verb block range must be ordered and at least 1")
        if self.drift_scale < 0 or self.drift_window_s <= 0:
            raise ValueError("drift scale must be non-negative with a positive window")
        if lo_g + lo_a > self.video_duration_s:
            raise ValueError("video too short to pack even one gap and action")
        if self.verbs_per_video < 0 or self.nouns_per_video < 0:
            raise ValueError("per-video vocabulary sizes must be non-negative")
        return self


@dataclass(frozen=True)
class PlantedAction:
    """Ground truth for one action instance inside a video."""

    start: float
    end: float
    verb_cluster: int
    noun_cluster: int


@dataclass(frozen=True, eq=False)
class WorldPrototypes:
    """The generating vectors; exposed so tests can build reference oracles."""

    verb_vis: np.ndarray  # (verbs, d_v)
    noun_vis: np.ndarray  # (nouns, d_v)
    background_vis: np.ndarray  # (d_v,)
    ambient: dict[str, np.ndarray]  # video_id -> (d_v,)
    verb_txt: np.ndarray  # (verbs, d_t)
    noun_txt: np.ndarray  # (nouns, d_t)
    word_vectors: dict[str, np.ndarray]  # surface word -> (d_t,)


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    """Videos, deduplicated evaluation queries, taxonomy and ground truth."""

    config: WorldConfig
    videos: tuple[NarratedVideo, ...]
    queries: tuple[EvalQuery, ...]
    taxonomy: Taxonomy
    prototypes: WorldPrototypes
    planted: dict[str, tuple[PlantedAction, ...]]  # video_id -> actions in time order


def _unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((count, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _cluster_words(kind: str, cluster: int, count: int) -> list[str]:
    return [f"{kind}{cluster}{chr(ord('a') + w)}" for w in range(count)]


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Generate a world, bit-identical for equal configs.

    Noise enters only as `noise_sigma` times standard normals drawn after all
    structure, so worlds that differ only in `noise_sigma` share layout,
    sentences and prototypes.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    rate = float(np.float32(config.feature_rate))

    verbs = config.verb_cluster_count
    nouns = config.noun_cluster_count
    wpc = config.words_per_cluster

    verb_txt = _unit_rows(rng, verbs, config.d_t)
    noun_txt = _unit_rows(rng, nouns, config.d_t)
    filler_txt = _unit_rows(rng, len(_FILLER_WORDS), config.d_t)

    word_vectors: dict[str, np.ndarray] = {}
    verb_words: list[list[str]] = []
    noun_words: list[list[str]] = []
    for cluster in range(verbs):
        forms = _cluster_words("verb", cluster, wpc)
        verb_words.append(forms)
        for word in forms:
            word_vectors[word] = verb_txt[cluster] + _WORD_FORM_SCALE * rng.standard_normal(config.d_t)
    for cluster in range(nouns):
        forms = _cluster_words("noun", cluster, wpc)
        noun_words.append(forms)
        for word in forms:
            word_vectors[word] = noun_txt[cluster] + _WORD_FORM_SCALE * rng.standard_normal(config.d_t)
    for word, vector in zip(_FILLER_WORDS, filler_txt):
        word_vectors[word] = vector

    taxonomy = Taxonomy(
        verb_clusters={w: c for c, forms in enumerate(verb_words) for w in forms},
        noun_clusters={w: c for c, forms in enumerate(noun_words) for w in forms},
    )

    verb_vis = _unit_rows(rng, verbs, config.d_v)
    noun_vis = _unit_rows(rng, nouns, config.d_v)
    background_vis = _unit_rows(rng, 1, config.d_v)[0]

    def realize_sentence(verb_cluster: int, noun_cluster: int) -> tuple[str, np.ndarray]:
        verb_word = verb_words[verb_cluster][int(rng.integers(0, wpc))]
        noun_word = noun_words[noun_cluster][int(rng.integers(0, wpc))]
        tokens = ["person", verb_word, noun_word]
        for _ in range(int(rng.integers(0, 3))):
            tokens.append(_FILLER_WORDS[int(rng.integers(0, len(_FILLER_WORDS)))])
        matrix = np.stack([word_vectors[t] for t in tokens]).astype(np.float32)
        return " ".join(tokens), matrix

    videos: list[NarratedVideo] = []
    queries: list[EvalQuery] = []
    planted: dict[str, tuple[PlantedAction, ...]] = {}
    ambient_by_video: dict[str, np.ndarray] = {}

    for video_idx in range(config.num_videos):
        video_id = f"vid{video_idx:04d}"
        ambient = config.ambient_scale * _unit_rows(rng, 1, config.d_v)[0]
        ambient_by_video[video_id] = ambient

        verb_pool = (np.arange(verbs) if config.verbs_per_video == 0
                     else rng.choice(verbs, size=min(config.verbs_per_video, verbs), replace=False))
        noun_pool = (np.arange(nouns) if config.nouns_per_video == 0
                     else rng.choice(nouns, size=min(config.nouns_per_video, nouns), replace=False))
        # Actions come in runs of a shared verb with varying nouns (activities
        # repeat locally), and (verb, noun) pairs stay unique per video while
        # possible, so evaluation queries remain unambiguous.
        lo_block, hi_block = config.verb_block_range
        used: set[tuple[int, int]] = set()

        def fresh_nouns(verb: int) -> list[int]:
            return [int(n) for n in noun_pool if (verb, int(n)) not in used]

        actions: list[PlantedAction] = []
        clock = 0.0
        block_verb = int(verb_pool[int(rng.integers(0, len(verb_pool)))])
        block_left = int(rng.integers(lo_block, hi_block + 1))
        while True:
            gap = rng.uniform(*config.gap_range)
            length = rng.uniform(*config.action_duration_range)
            if clock + gap + length > config.video_duration_s:
                break
            if block_left == 0 or not fresh_nouns(block_verb):
                candidates = [int(v) for v in verb_pool if fresh_nouns(int(v))]
                pool = candidates if candidates else [int(v) for v in verb_pool]
                block_verb = pool[int(rng.integers(0, len(pool)))]
                block_left = int(rng.integers(lo_block, hi_block + 1))
            noun_options = fresh_nouns(block_verb) or [int(n) for n in noun_pool]
            noun_cluster = noun_options[int(rng.integers(0, len(noun_options)))]
            used.add((block_verb, noun_cluster))
            block_left -= 1
            start = clock + gap
            end = start + length
            actions.append(PlantedAction(start, end, block_verb, noun_cluster))
            clock = end
        if not actions:
            raise ValueError(f"video {video_id}: packing produced no actions")

        narration_rows = []
        for action in actions:
            sentence, matrix = realize_sentence(action.verb_cluster, action.noun_cluster)
            midpoint = 0.5 * (action.start + action.end)
            jitter = rng.uniform(-config.timestamp_jitter_s, config.timestamp_jitter_s)
            timestamp = float(np.clip(midpoint + jitter, 0.0, config.video_duration_s))
            narration_rows.append((timestamp, sentence, matrix, action))

        narration_rows.sort(key=lambda row: row[0])
        narrations = tuple(
            Narration(sentence=sentence, word_features=matrix, timestamp=timestamp,
                      verb_cluster=action.verb_cluster, noun_cluster=action.noun_cluster,
                      index=idx)
            for idx, (timestamp, sentence, matrix, action) in enumerate(narration_rows))

        total_rows = int(round(config.video_duration_s * rate))
        centres = (np.arange(total_rows) + 0.5) / rate
        base = np.tile(background_vis + ambient, (total_rows, 1))
        for action in actions:
            inside = (action.start <= centres) & (centres < action.end)
            base[inside] = verb_vis[action.verb_cluster] + noun_vis[action.noun_cluster] + ambient
        # Slowly varying appearance drift: box-smoothed noise, so temporally
        # close rows look alike while splices in merged episodes do not.
        window = max(1, int(round(config.drift_window_s * rate)))
        drift = rng.standard_normal((total_rows + window - 1, config.d_v))
        kernel = np.ones(window) / window
        drift = np.stack([np.convolve(drift[:, d], kernel, mode="valid")
                          for d in range(config.d_v)], axis=1)
        base = base + config.drift_scale * np.sqrt(window) * drift
        features = (base + config.noise_sigma * rng.standard_normal((total_rows, config.d_v)))

        videos.append(NarratedVideo(
            video_id=video_id, duration=config.video_duration_s, feature_rate=rate,
            features=features.astype(np.float32), narrations=narrations))
        planted[video_id] = tuple(actions)

        for action in actions:
            sentence, matrix = realize_sentence(action.verb_cluster, action.noun_cluster)
            queries.append(EvalQuery(
                video_id=video_id, sentence=sentence, word_features=matrix,
                gt_start=action.start, gt_end=action.end,
                verb_cluster=action.verb_cluster, noun_cluster=action.noun_cluster))

    prototypes = WorldPrototypes(
        verb_vis=verb_vis, noun_vis=noun_vis, background_vis=background_vis,
        ambient=ambient_by_video, verb_txt=verb_txt, noun_txt=noun_txt,
        word_vectors=word_vectors)
    return SyntheticWorld(
        config=config, videos=tuple(videos),
        queries=tuple(dedup_eval_queries(queries)),
        taxonomy=taxonomy, prototypes=prototypes, planted=planted)


def oracle_grounding(world: SyntheticWorld, query: EvalQuery) -> tuple[float, float]:
    """The planted extent behind a query; test-only ground-truth access."""
    if not any(q is query for q in world.queries):
        raise KeyError("query does not belong to this world")
    midpoint = 0.5 * (query.gt_start + query.gt_end)
    for action in world.planted[query.video_id]:
        if (action.verb_cluster == query.verb_cluster
                and action.noun_cluster == query.noun_cluster
                and action.start <= midpoint < action.end):
            return action.start, action.end
    raise KeyError("no planted action matches the query")


# -- serialization to the on-disk dataset layout -----------------------------------


def _surface_words(sentence: str, taxonomy: Taxonomy) -> tuple[str, str]:
    tokens = sentence.split()
    verb = next(t for t in tokens if t in taxonomy.verb_clusters)
    noun = next(t for t in tokens if t in taxonomy.noun_clusters)
    return verb, noun


def _word_file_name(sentence: str) -> str:
    return hashlib.sha1(sentence.encode("utf-8")).hexdigest()[:16] + ".clmf"


def split_videos(world: SyntheticWorld, val_videos: int,
                 test_videos: int) -> dict[str, tuple[NarratedVideo, ...]]:
    """Partition videos into train/val/test by index order."""
    total = len(world.videos)
    if val_videos < 1 or test_videos < 1 or val_videos + test_videos >= total:
        raise ValueError("need at least one video in each of train, val and test")
    train_end = total - val_videos - test_videos
    return {
        "train": world.videos[:train_end],
        "val": world.videos[train_end:train_end + val_videos],
        "test": world.videos[train_end + val_videos:],
    }


def write_world(world: SyntheticWorld, out_dir: str | Path,
                val_videos: int = 2, test_videos: int = 2) -> dict[str, int]:
    """Emit taxonomy, per-video feature files, narrations and query files.

    Produces exactly the dataset layout the loaders read, so the rest of the
    pipeline is agnostic about data origin. Returns per-split video counts.
    """
    import json

    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "words").mkdir(parents=True, exist_ok=True)
    world.taxonomy.to_json(out_dir / "taxonomy.json")

    splits = split_videos(world, val_videos, test_videos)
    queries_by_video: dict[str, list[EvalQuery]] = {}
    for query in world.queries:
        queries_by_video.setdefault(query.video_id, []).append(query)

    def word_path(sentence: str, matrix: np.ndarray) -> str:
        name = _word_file_name(sentence)
        target = out_dir / "words" / name
        if not target.exists():
            save_feature_matrix(target, matrix, 0.0)  # word files carry no temporal rate
        return f"words/{name}"

    for split, videos in splits.items():
        narration_lines = []
        query_lines = []
        for video in videos:
            save_feature_matrix(out_dir / "features" / f"{video.video_id}.clmf",
                                video.features, video.feature_rate)
            for narration in video.narrations:
                verb, noun = _surface_words(narration.sentence, world.taxonomy)
                narration_lines.append(json.dumps({
                    "video_id": video.video_id,
                    "duration_s": video.duration,
                    "sentence": narration.sentence,
                    "timestamp_s": narration.timestamp,
                    "verb": verb,
                    "noun": noun,
                    "word_features_path": word_path(narration.sentence, narration.word_features),
                }))
            for query in queries_by_video.get(video.video_id, []):
                query_lines.append(json.dumps({
                    "video_id": query.video_id,
                    "sentence": query.sentence,
                    "gt_start_s": query.gt_start,
                    "gt_end_s": query.gt_end,
                    "word_features_path": word_path(query.sentence, query.word_features),
                }))
        (out_dir / f"{split}_narrations.jsonl").write_text(
            "\n".join(narration_lines) + "\n", encoding="utf-8")
        if split in ("val", "test"):
            (out_dir / f"{split}_queries.jsonl").write_text(
                "\n".join(query_lines) + "\n", encoding="utf-8")
    return {split: len(videos) for split, videos in splits.items()}
