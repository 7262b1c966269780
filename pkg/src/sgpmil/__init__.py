"""Sparse-Gaussian-process attention for multiple instance learning."""

from .data import InstanceBag, MilDataset, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split_dataset
from .evaluation import MetricsReport, PredictionRecord, evaluate, predict
from .mil_head import GatedAttentionMil, MilModel, forward_bag
from .trainer import TrainConfig, TrainHistory, train

__version__ = "0.1.0"
