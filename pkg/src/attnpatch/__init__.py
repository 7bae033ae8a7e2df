"""Kernelized cross-attention patch over a frozen reference bank, with a
Nadaraya-Watson laboratory and a benchmark runner, on numpy."""

from .data import ModalDataset, load_csv_tabular, load_idx_images, load_mnist_half, make_split
from .estimators import GaussianKDE, NadarayaWatsonRegressor, TAPClassifier
from .kernels import GAUSSIAN, Bandwidth, ContractError, bandwidth_schedule, kde, kernel_constants
from .models import ModelSpec, build, forward, load_checkpoint, save_checkpoint
from .nw import PairedSample, nw_estimate, psi, sine_problem, verify_theorem1
from .tap import ReferenceBank, TapParams, attention_weights, make_noise_bank, tap_forward
from .training import TrainConfig, batch_size_sweep, evaluate, final_metric, monte_carlo, train

__version__ = "0.1.0"

__all__ = [
    "GAUSSIAN",
    "Bandwidth",
    "ContractError",
    "GaussianKDE",
    "ModalDataset",
    "ModelSpec",
    "NadarayaWatsonRegressor",
    "PairedSample",
    "ReferenceBank",
    "TAPClassifier",
    "TapParams",
    "TrainConfig",
    "attention_weights",
    "bandwidth_schedule",
    "batch_size_sweep",
    "build",
    "evaluate",
    "final_metric",
    "forward",
    "kde",
    "kernel_constants",
    "load_checkpoint",
    "load_csv_tabular",
    "load_idx_images",
    "load_mnist_half",
    "make_noise_bank",
    "make_split",
    "monte_carlo",
    "nw_estimate",
    "psi",
    "save_checkpoint",
    "sine_problem",
    "tap_forward",
    "train",
    "verify_theorem1",
]
