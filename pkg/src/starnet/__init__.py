"""Online video phase recognition testbed.

A self-contained float64 autodiff core, a small conv backbone carrying a
multi-scale temporal action module, a causally masked transformer with two
regularized classifier heads, a deterministic synthetic-video generator,
and the training/evaluation machinery around them.
"""
from .tensor import (Tensor, Tape, OpCounter, NumericsError, ShapeError,
                     TapeError, parameter, constant, backward, sgd_step)
from .msta import MstaConfig, msta_forward, tdiff, temporal_delay, action_mask
from .model import (ModelConfig, ModelParams, PredictionRecord, config_hash,
                    init_params, starnet_forward)
from .losses import (RangeBounds, SequenceRanges, cross_entropy, kl_div,
                     sequence_ranges, dsr_loss, total_loss)
from .synthdata import (PhaseGrammar, PhaseMotion, PhaseSequence,
                        default_grammar, generate_dataset, load_dataset)
from .pipeline import (TrainConfig, TrainingDiverged, FeatureCache,
                       OnlineRecognizer, train_backbone, train_transformer,
                       cache_features, online_infer, save_checkpoint,
                       load_checkpoint)
from .metrics import (accuracy, phase_metrics, paired_ttest, summarize_videos,
                      ribbon_export, action_heatmap_export, cost_report)

__version__ = "0.1.0"
