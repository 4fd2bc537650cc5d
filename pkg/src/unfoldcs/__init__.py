"""Block-based compressive sensing with a gated, complexity-controllable
unrolled reconstruction network."""

from .errors import (ConfigError, DomainError, NumericError, StateError,
                     UnfoldCSError)
from .flops import FlopsModel
from .network import (PathTrace, ReconNet, load_checkpoint, save_checkpoint,
                      scan_checkpoints)
from .selector import (ENCODING_DIM, MU_PRESETS, GateDecision, ModulationInput,
                       encode_mu, gumbel_softmax)
from .sensing import (DEFAULT_BLOCK_PIXELS, DEFAULT_BLOCK_SIZE,
                      DEFAULT_OVERLAP_STRIDE, BlockLayout, MeasurementMatrix,
                      Measurements, fold, generate_phi, initialize, load_matrix,
                      make_layout, sample, save_matrix, unfold)
from .training import LossReport, TrainConfig, loss_rec, loss_select

__version__ = "0.1.0"

__all__ = [
    "BlockLayout", "ConfigError", "DEFAULT_BLOCK_PIXELS", "DEFAULT_BLOCK_SIZE",
    "DEFAULT_OVERLAP_STRIDE", "DomainError", "ENCODING_DIM", "FlopsModel",
    "GateDecision", "LossReport", "MU_PRESETS", "MeasurementMatrix",
    "Measurements", "ModulationInput", "NumericError", "PathTrace", "ReconNet",
    "StateError", "TrainConfig", "UnfoldCSError", "encode_mu", "fold",
    "generate_phi", "gumbel_softmax", "initialize", "load_checkpoint",
    "load_matrix", "loss_rec", "loss_select", "make_layout", "sample",
    "save_checkpoint", "save_matrix", "scan_checkpoints", "unfold",
]
