"""Variational filter surrogates coupled into a desk-scale explicit FEM solver."""

from .config import FamilyConfig, OptimConfig, TrainConfig, load_config, preset
from .coupling import FeminRunResult, ReplayForces, SurrogateDiverged, online_init, online_step, run_femin
from .dvbf import DvbfConfig, DvbfModel, GaussianDiag, NormStats, forward_window
from .fem import LoadCase, MeshModel, TimeSeriesRecord, make_chain, run_full, run_replay, truncate_model
from .training import Dataset, evaluate_offline, generate_dataset, make_windows, select_checkpoint, train

__version__ = "0.1.0"
