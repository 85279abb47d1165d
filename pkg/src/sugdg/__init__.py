"""Single-dataset domain generalisation for point-cloud classification."""

from .alignment import class_weights, js_distance, mmd2, sda_weights, total_loss, weighted_ce
from .config import TrainConfig, bundled_config, load_config, save_config
from .dataset import DatasetManifest, load_manifest, read_split, save_manifest, write_split
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    EvaluationError,
    LoadError,
    NumericError,
    SplitError,
    SugdgError,
)
from .experiment import run_experiment, run_seeds
from .geometry import PointCloud, RigidTransform, chamfer_distance, icp_score, normalize
from .net import ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .splitter import SplitResult, prediction_entropy, split_dataset
from .synth import SynthSpec, bundled_spec, generate_synthetic
from .training import EvalReport, evaluate, train_two_step

__version__ = "0.1.0"
