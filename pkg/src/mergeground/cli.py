"""Command-line entry points wiring the pipeline.

Subcommands: gen-world, train, eval, sweep, stats, demo-merge. Every command
is deterministic given its seed, echoes its resolved configuration next to
its outputs, and exits non-zero on failure (2 missing file, 3 config error,
4 numeric abort, 1 anything else).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import NumericError
from .data import Taxonomy, dataset_stats, load_dataset, load_queries
from .episodes import build_merged_segment, clip_bounds, clip_feature_rows, sample_template, sample_triplet
from .evaluation import (evaluate_queries, ground_query, threshold_sweep,
                         write_eval_report_csv, write_predictions_jsonl, write_sweep_csv)
from .model import GroundingModel, ModelConfig, load_checkpoint
from .synthetic import WorldConfig, generate_world, write_world
from .training import TrainConfig, train


class ConfigError(ValueError):
    """A run configuration file or value is invalid."""


@dataclass(frozen=True)
class RunConfig:
    """Union of world, model, training and evaluation settings.

    Serialized as a flat key=value text file; unknown keys are rejected.
    Defaults match the reference hyperparameters, so desk-scale runs are
    expected to override the model and training sizes.
    """

    seed: int = 0
    # world generation
    world_num_videos: int = 10
    world_duration_s: float = 180.0
    world_feature_rate: float = 1.87
    world_d_v: int = 24
    world_d_t: int = 16
    world_verb_clusters: int = 6
    world_noun_clusters: int = 6
    world_words_per_cluster: int = 2
    world_verbs_per_video: int = 4
    world_nouns_per_video: int = 5
    world_action_min_s: float = 2.0
    world_action_max_s: float = 4.0
    world_gap_min_s: float = 5.0
    world_gap_max_s: float = 9.0
    world_jitter_s: float = 0.5
    world_noise_sigma: float = 0.1
    world_ambient_scale: float = 0.5
    world_val_videos: int = 2
    world_test_videos: int = 2
    # model
    model_d_model: int = 2048
    model_blocks: int = 2
    model_heads: int = 6
    model_dropout: float = 0.3
    model_text_dropout: float = 0.5
    model_conditioning: str = "cross_attention"
    # training
    train_slots: int = 20
    train_batch_size: int = 32
    train_learning_rate: float = 1e-5
    train_epochs: int = 100
    train_lambda_neg: float = 1.0
    train_lambda_adv: float = 1.0
    train_mode: str = "merge"
    train_negatives: str = "same_video"
    train_min_sep: int = 3
    train_max_attempts: int = 1000
    train_bce_clamp: float = 1e-7
    train_val_epsilon: float = 0.8
    # evaluation
    eval_epsilon: float = 0.8

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            num_videos=self.world_num_videos,
            video_duration_s=self.world_duration_s,
            feature_rate=self.world_feature_rate,
            d_v=self.world_d_v,
            d_t=self.world_d_t,
            verb_cluster_count=self.world_verb_clusters,
            noun_cluster_count=self.world_noun_clusters,
            words_per_cluster=self.world_words_per_cluster,
            verbs_per_video=self.world_verbs_per_video,
            nouns_per_video=self.world_nouns_per_video,
            action_duration_range=(self.world_action_min_s, self.world_action_max_s),
            gap_range=(self.world_gap_min_s, self.world_gap_max_s),
            timestamp_jitter_s=self.world_jitter_s,
            noise_sigma=self.world_noise_sigma,
            ambient_scale=self.world_ambient_scale,
            seed=self.seed,
        )

    def model_config(self, d_v_in: int, d_t_in: int) -> ModelConfig:
        return ModelConfig(
            d_v_in=d_v_in,
            d_t_in=d_t_in,
            d_model=self.model_d_model,
            n_blocks=self.model_blocks,
            heads=self.model_heads,
            dropout_main=self.model_dropout,
            dropout_text_proj=self.model_text_dropout,
            conditioning_mode=self.model_conditioning,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            slots=self.train_slots,
            batch_size=self.train_batch_size,
            learning_rate=self.train_learning_rate,
            epochs=self.train_epochs,
            lambda_neg=self.train_lambda_neg,
            lambda_adv=self.train_lambda_adv,
            mode=self.train_mode,
            negatives=self.train_negatives,
            seed=self.seed,
            bce_clamp=self.train_bce_clamp,
            min_sep=self.train_min_sep,
            max_attempts=self.train_max_attempts,
            val_epsilon=self.train_val_epsilon,
        )


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def parse_config_text(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys rejected."""
    values: dict[str, object] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value, got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {line_no}: {exc}") from None
    return RunConfig(**values)


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def serialize_config(config: RunConfig) -> str:
    lines = []
    for field in dataclasses.fields(RunConfig):
        value = getattr(config, field.name)
        text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{field.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path | None, seed_override: int | None = None) -> RunConfig:
    if path is None:
        config = RunConfig()
    else:
        config = parse_config_text(Path(path).read_text(encoding="utf-8"))
    if seed_override is not None:
        config = dataclasses.replace(config, seed=seed_override)
    return config


def _echo_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(serialize_config(config), encoding="utf-8")


# -- commands -----------------------------------------------------------------


def cmd_gen_world(config: RunConfig, out_dir: Path) -> int:
    try:
        world = generate_world(config.world_config())
        counts = write_world(world, out_dir,
                             val_videos=config.world_val_videos,
                             test_videos=config.world_test_videos)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _echo_config(config, out_dir)
    print(f"wrote world to {out_dir}: " +
          ", ".join(f"{split}={count} videos" for split, count in counts.items()))
    return 0


def cmd_train(config: RunConfig, data_dir: Path, out_dir: Path) -> int:
    taxonomy = Taxonomy.from_json(data_dir / "taxonomy.json")
    train_videos = load_dataset(data_dir, "train", taxonomy)
    val_videos = load_dataset(data_dir, "val", taxonomy)
    val_queries = load_queries(data_dir, "val", taxonomy)
    d_v_in = train_videos[0].features.shape[1]
    d_t_in = train_videos[0].narrations[0].word_features.shape[1]
    try:
        model_config = config.model_config(d_v_in, d_t_in).validate()
        train_config = config.train_config().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _echo_config(config, out_dir)
    result = train(train_videos, val_videos, val_queries, model_config, train_config,
                   out_dir=out_dir, log=print)
    print(f"best epoch {result.best_epoch} with val mR@1 {result.best_val_mr1:.2f}%; "
          f"checkpoint at {result.checkpoint_path}")
    return 0


def cmd_eval(checkpoint: Path, data_dir: Path, split: str, epsilon: float,
             out_dir: Path | None) -> int:
    model_config, params, _ = load_checkpoint(checkpoint)
    model = GroundingModel(model_config, params)
    taxonomy = Taxonomy.from_json(data_dir / "taxonomy.json")
    videos = {v.video_id: v for v in load_dataset(data_dir, split, taxonomy)}
    queries = load_queries(data_dir, split, taxonomy)
    report = evaluate_queries(model, videos, queries, epsilon)
    line = ", ".join([f"R@1[{theta:.1f}]={report.r1[theta]:.2f}%" for theta in sorted(report.r1)]
                     + [f"mR@1={report.mr1:.2f}%"])
    print(f"{split} ({len(queries)} queries, epsilon={epsilon}): {line}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_eval_report_csv(out_dir / "report.csv", report)
        predictions = [ground_query(model, videos[q.video_id], q.word_features, epsilon, q)
                       for q in queries]
        write_predictions_jsonl(out_dir / "predictions.jsonl", predictions)
        (out_dir / "eval_settings.txt").write_text(
            f"checkpoint = {checkpoint}\nsplit = {split}\nepsilon = {epsilon!r}\n",
            encoding="utf-8")
    return 0


def cmd_sweep(checkpoint: Path, data_dir: Path, split: str, epsilons: list[float],
              out_dir: Path | None) -> int:
    model_config, params, _ = load_checkpoint(checkpoint)
    model = GroundingModel(model_config, params)
    taxonomy = Taxonomy.from_json(data_dir / "taxonomy.json")
    videos = {v.video_id: v for v in load_dataset(data_dir, split, taxonomy)}
    queries = load_queries(data_dir, split, taxonomy)
    results = threshold_sweep(model, videos, queries, epsilons)
    for epsilon, report in results:
        print(f"epsilon={epsilon:.2f}  mR@1={report.mr1:.2f}%")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(out_dir / "sweep.csv", results)
        (out_dir / "eval_settings.txt").write_text(
            f"checkpoint = {checkpoint}\nsplit = {split}\n"
            f"epsilons = {','.join(repr(e) for e in epsilons)}\n", encoding="utf-8")
    return 0


def cmd_stats(data_dir: Path, out_path: Path | None) -> int:
    taxonomy = Taxonomy.from_json(data_dir / "taxonomy.json")
    videos = []
    queries = []
    for split in ("train", "val", "test"):
        if (data_dir / f"{split}_narrations.jsonl").exists():
            videos.extend(load_dataset(data_dir, split, taxonomy))
        if (data_dir / f"{split}_queries.jsonl").exists():
            queries.extend(load_queries(data_dir, split, taxonomy))
    report = dataset_stats(videos, queries)
    print(report.to_text())
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(report.to_text() + "\n", encoding="utf-8")
    return 0


def cmd_demo_merge(config: RunConfig, data_dir: Path, seed: int) -> int:
    taxonomy = Taxonomy.from_json(data_dir / "taxonomy.json")
    videos = load_dataset(data_dir, "train", taxonomy)
    rng = np.random.default_rng(seed)
    video = videos[int(rng.integers(0, len(videos)))]
    i, j, k = sample_triplet(video, rng, config.train_min_sep, config.train_max_attempts)
    bounds_i, bounds_j = clip_bounds(video, i), clip_bounds(video, j)
    template = sample_template(config.train_slots, rng)
    narrs = video.narrations
    episode = build_merged_segment(
        clip_feature_rows(video, bounds_i), clip_feature_rows(video, bounds_j), template,
        sentences=(narrs[i].word_features, narrs[j].word_features, narrs[k].word_features))
    print(f"video {video.video_id} ({video.duration:.0f} s, {len(narrs)} narrations)")
    print(f"triplet i={i} (t={narrs[i].timestamp:.1f} s)  j={j} (t={narrs[j].timestamp:.1f} s)  k={k}")
    print(f"  c_i: {narrs[i].sentence!r}")
    print(f"  c_j: {narrs[j].sentence!r}")
    print(f"  c_k: {narrs[k].sentence!r} (negative)")
    print(f"clip_i bounds [{bounds_i.lo:.1f}, {bounds_i.hi:.1f}] s; "
          f"clip_j bounds [{bounds_j.lo:.1f}, {bounds_j.hi:.1f}] s")
    print(f"template alpha={template.alpha:.3f} beta={template.beta:.3f} "
          f"(effective beta {episode.beta:.2f})")
    print("y   = " + "".join(str(bit) for bit in episode.y_i))
    for slot, (clip, row) in enumerate(episode.src_rows):
        owner = "clip_i" if clip == 0 else "clip_j"
        print(f"slot {slot:2d} <- {owner} row {row}")
    return 0


# -- argument parsing ------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergeground",
        description="Temporal sentence grounding from narration timestamps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic dataset")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a grounding model")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--epsilon", type=float, default=0.8)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("sweep", help="evaluate a list of prediction thresholds")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--epsilon", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
                   help="comma-separated threshold list")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("stats", help="dataset statistics over all splits")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("demo-merge", help="dump one sampled merged episode")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-world":
            return cmd_gen_world(load_config(args.config, args.seed), args.out)
        if args.command == "train":
            return cmd_train(load_config(args.config, args.seed), args.data, args.out)
        if args.command == "eval":
            if not 0.0 < args.epsilon < 1.0:
                raise ConfigError(f"epsilon {args.epsilon} outside (0, 1)")
            return cmd_eval(args.checkpoint, args.data, args.split, args.epsilon, args.out)
        if args.command == "sweep":
            try:
                epsilons = [float(part) for part in str(args.epsilon).split(",") if part.strip()]
            except ValueError as exc:
                raise ConfigError(f"bad epsilon list {args.epsilon!r}") from exc
            if not epsilons or not all(0.0 < e < 1.0 for e in epsilons):
                raise ConfigError("epsilon list must be non-empty with values in (0, 1)")
            return cmd_sweep(args.checkpoint, args.data, args.split, epsilons, args.out)
        if args.command == "stats":
            return cmd_stats(args.data, args.out)
        if args.command == "demo-merge":
            return cmd_demo_merge(load_config(args.config), args.data, args.seed)
        raise ConfigError(f"unknown command {args.command!r}")
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
