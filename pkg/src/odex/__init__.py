"""Task-agnostic continual learning with OOD-gated model-pool expansion.

A tiny hand-differentiated segmentation network tracks the Gaussian
statistics of its first batch-norm features per training stage; new
stages reuse the closest pool model when their cumulative Mahalanobis
distance stays under a calibrated threshold and spawn a new model
otherwise. Includes synthetic drifting streams, baselines, transfer
metrics and an experiment harness.
"""

from .backend import BACKEND
from .learner import (Learner, LearnerConfig, Sample, dice_bce_loss,
                      extract_features, forward, init_learner, train_stage)
from .metrics import (ScoreTensor, build_score_tensor, compute_bwt,
                      compute_fwt, dice)
from .oodgate import (GaussianStats, ThresholdCalibration, calibrate_threshold,
                      fit_gaussian, mahalanobis, normalize_distance,
                      stage_distance, summed_history_distance)
from .pool import (ExpansionDecision, ModelEntry, ModelPool, Strategy, decide,
                   infer, infer_batch, new_pool, select_model,
                   snapshot_for_stage, train_on_stage, untrained_pool)
from .stream import (build_constant_source_stream, build_shifting_source_stream,
                     build_stream, build_transformed_stream)

__version__ = "0.1.0"
