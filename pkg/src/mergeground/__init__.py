"""Temporal sentence grounding in long videos from narration timestamps only.

Training pairs are manufactured by merging two clips of the same video into a
fixed-length segment whose artificial boundary supplies contrastive
supervision; a text-conditioned attention network scores every visual
position, and thresholded inference grounds sentences in full untrimmed
videos.
"""

from .autograd import NumericError, Tensor, parameter
from .data import (EvalQuery, Narration, NarratedVideo, StatsReport, Taxonomy,
                   attach_features, dataset_stats, dedup_eval_queries, load_annotations,
                   load_dataset, load_eval_queries, load_feature_matrix, load_queries,
                   save_feature_matrix, semantically_distinct)
from .episodes import (ClipBounds, MergedEpisode, MergeTemplate, build_background_episode,
                       build_merged_segment, clip_bounds, clip_feature_rows, make_template,
                       resample_features, sample_template, sample_triplet)
from .evaluation import (EvalReport, GroundingPrediction, Segment, evaluate_queries,
                         extract_segments, ground_query, iou, mean_r1,
                         normalize_predictions, random_baseline, recall_at_k,
                         threshold_sweep)
from .model import (GroundingModel, ModelConfig, ModelParameters, init_parameters,
                    load_checkpoint, save_checkpoint)
from .synthetic import (PlantedAction, SyntheticWorld, WorldConfig, generate_world,
                        oracle_grounding, write_world)
from .training import (Adam, TrainConfig, TrainResult, bce, loss_adv, loss_neg, loss_sep,
                       total_loss, train)

__version__ = "0.1.0"
