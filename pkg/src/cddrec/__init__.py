"""Conditional denoising diffusion model for next-item sequential recommendation."""

from .config import RunConfig, TrainConfig
from .corpus import InteractionSequence, ItemCatalog, PaddedBatch, build_sequences, load_interactions
from .evaluation import MetricsReport, avg_change, evaluate, rank_metrics
from .model import CDDRec, make_encoder
from .schedule import DiffusionSchedule, build_schedule
from .trainer import TrainReport, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "CDDRec",
    "DiffusionSchedule",
    "InteractionSequence",
    "ItemCatalog",
    "MetricsReport",
    "PaddedBatch",
    "RunConfig",
    "TrainConfig",
    "TrainReport",
    "avg_change",
    "build_schedule",
    "build_sequences",
    "evaluate",
    "fit",
    "load_interactions",
    "make_encoder",
    "rank_metrics",
    "train_step",
]
