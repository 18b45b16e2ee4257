"""Multi-task chest radiograph learning with noisy-label analytics.

The pieces fit together in pipeline order: :mod:`cxrkit.datakit` renders
labeled synthetic radiographs, :mod:`cxrkit.normalize` windows their
intensities, :mod:`cxrkit.model` and :mod:`cxrkit.training` fit the
shared-encoder classifier under dataset-masked losses, and
:mod:`cxrkit.agreement` plus :mod:`cxrkit.band` quantify and filter
label noise. :mod:`cxrkit.cli` drives the same steps from the shell.
"""

from .agreement import (AgreementRow, ConfidenceCategory, ReaderMatrix,
                        agreement_report, confidence_categories, fleiss_kappa,
                        positive_disagreement, ppa_npa, relabel)
from .band import (BandParams, UncertaintyBand, apply_band, band_report,
                   calibrate_band, calibrate_threshold, calibrate_widths)
from .datakit import (AbnormalityRule, Corpus, Manifest, Placement,
                      ReaderStudy, SyntheticSpec, default_rules,
                      generate_corpus, generate_reader_study, load_manifest,
                      read_annotations, read_manifest, read_scores,
                      write_corpus, write_manifest)
from .exceptions import (CheckpointError, ConfigError, CxrkitError,
                         DegenerateClassError, DegenerateImageError,
                         IngestError, NumericsError, ShapeError,
                         UndefinedMetricError)
from .losses import (ClassWeights, LabelBatch, LabelRecord, abnormality_loss,
                     compute_class_weights, compute_spatial_weights,
                     global_loss, location_loss, segmentation_loss)
from .metrics import bootstrap_ci, roc_auc
from .model import Model, ModelConfig, build_model, full_scale_config
from .normalize import (DynamicWindowNormalizer, NormalizationParams,
                        find_image_window, normalize_image)
from .training import (LabeledSample, MultiTaskClassifier, SplitPlan,
                       TrainConfig, TrainResult, evaluate_class_aucs,
                       run_paired_experiment, run_size_sweep, split_by_patient,
                       train)

__version__ = "0.1.0"

__all__ = [
    "AbnormalityRule", "AgreementRow", "BandParams", "CheckpointError",
    "ClassWeights", "ConfidenceCategory", "ConfigError", "Corpus",
    "CxrkitError", "DegenerateClassError", "DegenerateImageError",
    "DynamicWindowNormalizer", "IngestError", "LabelBatch", "LabelRecord",
    "LabeledSample", "Manifest", "Model", "ModelConfig",
    "MultiTaskClassifier", "NormalizationParams", "NumericsError",
    "Placement", "ReaderMatrix", "ReaderStudy", "ShapeError", "SplitPlan",
    "SyntheticSpec", "TrainConfig", "TrainResult", "UncertaintyBand",
    "UndefinedMetricError", "abnormality_loss", "agreement_report",
    "apply_band", "band_report", "bootstrap_ci", "build_model",
    "calibrate_band", "calibrate_threshold", "calibrate_widths",
    "compute_class_weights", "compute_spatial_weights",
    "confidence_categories", "default_rules", "evaluate_class_aucs",
    "find_image_window", "fleiss_kappa", "full_scale_config",
    "generate_corpus", "generate_reader_study", "global_loss",
    "load_manifest", "location_loss", "normalize_image",
    "positive_disagreement", "ppa_npa", "read_annotations", "read_manifest",
    "read_scores", "relabel", "roc_auc", "run_paired_experiment",
    "run_size_sweep", "segmentation_loss", "split_by_patient", "train",
    "write_corpus", "write_manifest",
]
