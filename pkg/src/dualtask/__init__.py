"""Dual-task video search: a joint video-text embedding trained together
with a concept decoder, plus Boolean query handling, result pruning and
TREC-style evaluation."""

from .data import Dataset, Vocabulary, build_vocabulary, generate_synthetic_corpus, tokenize
from .encoding import EncoderConfig
from .evaluation import average_precision, inferred_ap, randomization_test
from .index import Index, RankedList, build_index, search_combined
from .model import DualTaskModel
from .training import ModelCheckpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Vocabulary", "build_vocabulary", "generate_synthetic_corpus", "tokenize",
    "EncoderConfig", "average_precision", "inferred_ap", "randomization_test",
    "Index", "RankedList", "build_index", "search_combined", "DualTaskModel",
    "ModelCheckpoint", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
