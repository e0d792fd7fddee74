"""Trait prediction from two-session volumetric recordings via cluster-wise prediction-error signatures."""

from .clustering import CentroidSet, OccupancyProfile, assign, fit_kmeans, occupancy, select_k
from .evaluation import (
    EvalReport,
    PipelineConfig,
    SplitPlan,
    corrected_t_test,
    evaluate,
    make_splits,
    run_baseline,
    run_pipeline,
)
from .matching import MatchMap, match_all, match_frames
from .predictor import PredictorConfig, PredictorModel, build_dataset, grad_check, train
from .readout import LinearReadout, fit_readout, predict, roc_auc, select_lambda
from .signature import SignatureMatrix, build_signature, flatten
from .synth import GeneratorConfig, GroundTruth, generate_cohort, write_cohort
from .volume import Cohort, CohortFormatError, ROIMask, SubjectRecord, load_cohort, save_cohort, validate_cohort

__version__ = "0.1.0"
