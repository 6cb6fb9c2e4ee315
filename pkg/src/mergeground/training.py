"""Losses, the adaptive-moment optimizer and the seeded training loop.

Each step builds a batch of merged (or background) episodes, runs three
conditioned passes plus one unconditioned pass, combines the separation,
negative and adversarial losses, and applies one optimizer update. After
every epoch the mean Recall@1 on the validation split decides the best
checkpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import NumericError, Tensor, as_tensor
from .data import EvalQuery, Narration, NarratedVideo, semantically_distinct
from .episodes import (DegenerateClipError, InsufficientBackgroundError, MergedEpisode,
                       NoValidTripletError, build_background_episode, build_merged_segment,
                       clip_bounds, clip_feature_rows, sample_template)
from .evaluation import evaluate_queries
from .model import GroundingModel, ModelConfig, ModelParameters, init_parameters, save_checkpoint

MODE_MERGE = "merge"
MODE_BACKGROUND = "background_ablation"
NEGATIVES_SAME = "same_video"
NEGATIVES_RANDOM = "random_video"

METRIC_COLUMNS = ("epoch", "train_loss", "val_r1_01", "val_r1_03", "val_r1_05", "val_mr1")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the reference setup."""

    slots: int = 20  # visual features per merged segment
    batch_size: int = 32
    learning_rate: float = 1e-5
    epochs: int = 100
    lambda_neg: float = 1.0
    lambda_adv: float = 1.0
    mode: str = MODE_MERGE
    negatives: str = NEGATIVES_SAME
    seed: int = 0
    bce_clamp: float = 1e-7
    min_sep: int = 3
    max_attempts: int = 1000
    val_epsilon: float = 0.8

    def validate(self) -> "TrainConfig":
        if self.slots < 2 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("slots, batch_size and epochs must be positive (slots >= 2)")
        if self.learning_rate <= 0 or not 0 < self.bce_clamp < 0.5:
            raise ValueError("bad learning_rate or bce_clamp")
        if self.lambda_neg < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")
        if self.mode not in (MODE_MERGE, MODE_BACKGROUND):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.negatives not in (NEGATIVES_SAME, NEGATIVES_RANDOM):
            raise ValueError(f"unknown negatives policy {self.negatives!r}")
        if not 0 < self.val_epsilon < 1:
            raise ValueError("val_epsilon must lie in (0, 1)")
        return self


# -- losses -----------------------------------------------------------------


def _bce_terms(p: Tensor, target, clamp: float) -> Tensor:
    clamped = p.clip(clamp, 1.0 - clamp)
    target = np.asarray(target, dtype=np.float64)
    return -(target * clamped.log() + (1.0 - target) * (1.0 - clamped).log())


def bce(p, target, clamp: float = 1e-7):
    """Mean binary cross entropy with probabilities clamped away from {0, 1}.

    Accepts plain arrays (returns float) or autograd tensors (returns Tensor).
    """
    tensor_in = isinstance(p, Tensor)
    p_t = as_tensor(p)
    target = np.asarray(target, dtype=np.float64)
    if p_t.shape != target.shape:
        raise ValueError(f"shape mismatch: predictions {p_t.shape} vs targets {target.shape}")
    out = _bce_terms(p_t, target, clamp).mean()
    return out if tensor_in else out.item()


def loss_sep(p_i, p_j, y_i, y_j, beta: float, clamp: float = 1e-7):
    """Separation loss: (1-beta)*BCE(p_i, y_i) + beta*BCE(p_j, y_j)."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    return (1.0 - beta) * bce(p_i, y_i, clamp) + beta * bce(p_j, y_j, clamp)


def loss_neg(p_k, clamp: float = 1e-7):
    """Negative-sentence loss: the whole segment should score zero."""
    return bce(p_k, np.zeros(np.shape(p_k)), clamp)


def loss_adv(p_uncond, clamp: float = 1e-7):
    """Adversarial loss: the unconditioned pass should sit at maximal uncertainty."""
    return bce(p_uncond, np.full(np.shape(p_uncond), 0.5), clamp)


def total_loss(parts, lambdas):
    """Weighted sum: sep + lambda_neg * neg + lambda_adv * adv."""
    sep, neg, adv = parts
    lambda_neg, lambda_adv = lambdas
    for part in parts:
        value = part.item() if isinstance(part, Tensor) else float(part)
        if not np.isfinite(value):
            raise NumericError("non-finite loss component")
    return sep + lambda_neg * neg + lambda_adv * adv


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Adaptive-moment gradient descent over named parameter tensors."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            grad = tensor.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            tensor.data = tensor.data - self.learning_rate * update

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()


# -- episode sampling ------------------------------------------------------------


def _anchored_triplet(video: NarratedVideo, i: int, rng: np.random.Generator,
                      min_sep: int, max_attempts: int) -> tuple[int, int] | None:
    """Sample (j, k) for a fixed anchor i, or None if rejection fails."""
    narrations = video.narrations
    n = len(narrations)
    for _ in range(max_attempts):
        j, k = rng.integers(0, n, size=2)
        if abs(i - j) < min_sep or k == i or k == j:
            continue
        if not (semantically_distinct(narrations[i], narrations[j])
                and semantically_distinct(narrations[i], narrations[k])
                and semantically_distinct(narrations[j], narrations[k])):
            continue
        return int(j), int(k)
    return None


def _random_video_negative(videos: Sequence[NarratedVideo], exclude: str,
                           distinct_from: Sequence[Narration], rng: np.random.Generator,
                           max_attempts: int) -> Narration | None:
    pool = [n for v in videos if v.video_id != exclude for n in v.narrations]
    if not pool:
        return None
    for _ in range(max_attempts):
        candidate = pool[int(rng.integers(0, len(pool)))]
        if all(semantically_distinct(candidate, other) for other in distinct_from):
            return candidate
    return None


def _build_merge_episode(video: NarratedVideo, i: int, videos: Sequence[NarratedVideo],
                         config: TrainConfig, rng: np.random.Generator) -> MergedEpisode | None:
    pair = _anchored_triplet(video, i, rng, config.min_sep, config.max_attempts)
    if pair is None:
        return None
    j, k = pair
    narrations = video.narrations
    try:
        rows_i = clip_feature_rows(video, clip_bounds(video, i))
        rows_j = clip_feature_rows(video, clip_bounds(video, j))
    except DegenerateClipError:
        return None
    negative = narrations[k]
    if config.negatives == NEGATIVES_RANDOM:
        negative = _random_video_negative(videos, video.video_id,
                                          (narrations[i], narrations[j]), rng,
                                          config.max_attempts)
        if negative is None:
            return None
    template = sample_template(config.slots, rng)
    episode = build_merged_segment(
        rows_i, rows_j, template,
        sentences=(narrations[i].word_features, narrations[j].word_features,
                   negative.word_features))
    return MergedEpisode(
        features=episode.features, y_i=episode.y_i, y_j=episode.y_j, beta=episode.beta,
        sentences=episode.sentences, alpha=episode.alpha, video_id=video.video_id,
        indices=(i, j, k), merged=True, src_rows=episode.src_rows)


def _build_background_episode(video: NarratedVideo, i: int, videos: Sequence[NarratedVideo],
                              config: TrainConfig, rng: np.random.Generator) -> MergedEpisode | None:
    negative = None
    if config.negatives == NEGATIVES_RANDOM:
        negative = _random_video_negative(videos, video.video_id,
                                          (video.narrations[i],), rng, config.max_attempts)
        if negative is None:
            return None
    try:
        return build_background_episode(video, i, config.slots, rng, negative=negative,
                                        max_attempts=config.max_attempts)
    except (DegenerateClipError, InsufficientBackgroundError, NoValidTripletError):
        return None


def sample_epoch_episodes(videos: Sequence[NarratedVideo], config: TrainConfig,
                          rng: np.random.Generator) -> list[MergedEpisode]:
    """One episode per narration (as anchor) per video, shuffled."""
    episodes: list[MergedEpisode] = []
    build = _build_merge_episode if config.mode == MODE_MERGE else _build_background_episode
    for video in videos:
        for i in range(len(video.narrations)):
            episode = build(video, i, videos, config, rng)
            if episode is not None:
                episodes.append(episode)
    order = rng.permutation(len(episodes))
    return [episodes[idx] for idx in order]


# -- batched loss ------------------------------------------------------------------


def _pad_sentences(sentences: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    longest = max(words.shape[0] for words in sentences)
    d_t = sentences[0].shape[1]
    padded = np.zeros((len(sentences), longest, d_t), dtype=np.float64)
    mask = np.zeros((len(sentences), longest), dtype=np.float64)
    for row, words in enumerate(sentences):
        padded[row, :words.shape[0]] = words
        mask[row, :words.shape[0]] = 1.0
    return padded, mask


def _per_episode_bce(probs: Tensor, targets: np.ndarray, clamp: float) -> Tensor:
    return _bce_terms(probs, targets, clamp).mean(axis=-1)


def batch_losses(model: GroundingModel, episodes: Sequence[MergedEpisode],
                 config: TrainConfig, train: bool = True,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(sep, neg, adv) losses for one batch of episodes.

    Background mode doubles the separation weight and drops the second
    sentence's term, since those episodes carry no c_j.
    """
    visual = np.stack([e.features for e in episodes]).astype(np.float64)
    betas = np.array([e.beta for e in episodes])
    y_i = np.stack([e.y_i for e in episodes]).astype(np.float64)
    clamp = config.bce_clamp

    words_i, mask_i = _pad_sentences([e.sentences[0] for e in episodes])
    p_i = model.forward_batch(visual, words_i, mask_i, train, rng)
    bce_i = _per_episode_bce(p_i, y_i, clamp)

    if config.mode == MODE_MERGE:
        y_j = np.stack([e.y_j for e in episodes]).astype(np.float64)
        words_j, mask_j = _pad_sentences([e.sentences[1] for e in episodes])
        p_j = model.forward_batch(visual, words_j, mask_j, train, rng)
        bce_j = _per_episode_bce(p_j, y_j, clamp)
        sep = ((1.0 - betas) * bce_i + betas * bce_j).mean()
    else:
        sep = (2.0 * (1.0 - betas) * bce_i).mean()

    words_k, mask_k = _pad_sentences([e.sentences[2] for e in episodes])
    p_k = model.forward_batch(visual, words_k, mask_k, train, rng)
    neg = _per_episode_bce(p_k, np.zeros_like(y_i), clamp).mean()

    p_uncond = model.forward_batch(visual, None, None, train, rng)
    adv = _per_episode_bce(p_uncond, np.full_like(y_i, 0.5), clamp).mean()
    return sep, neg, adv


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    """Best checkpoint (in memory and optionally on disk) plus the metric log."""

    best_epoch: int
    best_val_mr1: float
    metric_rows: list[tuple]
    params: ModelParameters
    model_config: ModelConfig
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def write_metric_csv(path: str | Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for epoch, loss, r01, r03, r05, mr1 in rows:
            writer.writerow([epoch, f"{loss:.6f}", f"{r01:.6f}", f"{r03:.6f}",
                             f"{r05:.6f}", f"{mr1:.6f}"])


def train(train_videos: Sequence[NarratedVideo], val_videos: Sequence[NarratedVideo],
          val_queries: Sequence[EvalQuery], model_config: ModelConfig, config: TrainConfig,
          out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Train from scratch and keep the epoch with the best validation mR@1.

    Fully deterministic for a fixed (config, seed): parameter init, episode
    sampling, dropout and batch order all derive from the configured seed.
    """
    config.validate()
    if not train_videos:
        raise ValueError("training requires at least one video")
    if not val_queries:
        raise ValueError("training requires a non-empty validation split")

    params = init_parameters(model_config, config.seed)
    model = GroundingModel(model_config, params)
    optimizer = Adam(params.tensors, config.learning_rate)
    videos_by_id = {v.video_id: v for v in val_videos}

    best_mr1 = -np.inf
    best_epoch = 0
    best_params = params.copy()
    rows: list[tuple] = []

    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        episodes = sample_epoch_episodes(train_videos, config, rng)
        if not episodes:
            raise ValueError("no valid episodes could be sampled from the training videos")

        losses = []
        for start in range(0, len(episodes), config.batch_size):
            batch = episodes[start:start + config.batch_size]
            optimizer.zero_grad()
            loss = total_loss(batch_losses(model, batch, config, train=True, rng=rng),
                              (config.lambda_neg, config.lambda_adv))
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        report = evaluate_queries(model, videos_by_id, val_queries, config.val_epsilon)
        row = (epoch, float(np.mean(losses)), report.r1[0.1], report.r1[0.3],
               report.r1[0.5], report.mr1)
        rows.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  loss {row[1]:.4f}  val mR@1 {report.mr1:.2f}%")
        if report.mr1 > best_mr1:
            best_mr1 = report.mr1
            best_epoch = epoch
            best_params = params.copy()

    result = TrainResult(best_epoch=best_epoch, best_val_mr1=float(best_mr1),
                         metric_rows=rows, params=best_params, model_config=model_config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out_dir / "metrics.csv"
        write_metric_csv(result.metrics_path, rows)
        result.checkpoint_path = out_dir / "best.npz"
        save_checkpoint(result.checkpoint_path, model_config, best_params, config.seed,
                        extra={"best_epoch": best_epoch, "best_val_mr1": float(best_mr1),
                               "optimizer": {"name": "adam", "beta1": optimizer.beta1,
                                             "beta2": optimizer.beta2, "eps": optimizer.eps}})
    return result
