"""Acetabular version regression from AP pelvic radiographs.

Training, five-fold cross-validation and clinical error-band evaluation
for a dual-output attention-gated regression network, plus a synthetic
phantom population that makes the whole pipeline verifiable without
clinical data.
"""

__version__ = "0.1.0"

from .records import (PatientRecord, Gender, DatasetStats, ingest, compute_stats,
                      normalize_age, encode_gender, decode_gender,
                      normalize_angles, denormalize_angles)
from .preprocess import (ImagePlane, ModelInput, AugmentationPolicy,
                         rescale, normalize_intensity, triple_channels,
                         mirror_sample, augment)
from .model import (BackboneSpec, AttentionHeadSpec, ModelBundle, build,
                    forward, predict_degrees, save_bundle, load_bundle,
                    attention_pool)
from .training import Nadam, PlateauSchedule, TrainRunConfig, mse_loss, train
from .folds import FoldPlan, make_folds, run_cv
from .report import (ErrorBand, classify_error, fold_table, group_report,
                     angle_histogram, build_report, emit_report, emit_plots)
from .phantom import PhantomSpec, generate, reference_decode

__all__ = [name for name in dir() if not name.startswith("_")]
