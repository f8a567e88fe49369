"""Desk-scale unified sequence-to-sequence vision-language model on numpy."""
from .coords import BBox, Codebook
from .model import ModelConfig, OFAModel, collate, load_checkpoint, save_checkpoint
from .tasks import Task, TaskRecord, serialize_sample
from .training import TrainConfig, train
from .vocab import UnifiedVocab, build_vocab

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Codebook",
    "ModelConfig",
    "OFAModel",
    "Task",
    "TaskRecord",
    "TrainConfig",
    "UnifiedVocab",
    "build_vocab",
    "collate",
    "load_checkpoint",
    "save_checkpoint",
    "serialize_sample",
    "train",
]
