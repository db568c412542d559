"""dimekit: a numpy DimeNet++ with forces, ensembles and a toy collision generator."""

from . import basis, checkpoint, datakit, diffcore, geometry, model, trainer, uncertainty
from .basis import BasisConfig
from .errors import (
    ContractViolation,
    DegenerateGeometryError,
    DimekitError,
    InputError,
    ParseError,
    TrainingDiverged,
)
from .geometry import AtomicConfiguration, build_edges, build_triplets, compute_angles
from .model import DimeNetPP, ModelConfig, ParameterStore, Prediction, forward, mve_forward, predict_forces
from .trainer import Metrics, TrainConfig, evaluate, train
from .uncertainty import Ensemble, calibration, cov_identity_check, ensemble_predict, ensemble_train

__version__ = "0.1.0"

__all__ = [
    "basis",
    "checkpoint",
    "datakit",
    "diffcore",
    "geometry",
    "model",
    "trainer",
    "uncertainty",
    "BasisConfig",
    "ContractViolation",
    "DegenerateGeometryError",
    "DimekitError",
    "InputError",
    "ParseError",
    "TrainingDiverged",
    "AtomicConfiguration",
    "build_edges",
    "build_triplets",
    "compute_angles",
    "DimeNetPP",
    "ModelConfig",
    "ParameterStore",
    "Prediction",
    "forward",
    "mve_forward",
    "predict_forces",
    "Metrics",
    "TrainConfig",
    "evaluate",
    "train",
    "Ensemble",
    "calibration",
    "cov_identity_check",
    "ensemble_predict",
    "ensemble_train",
]
