"""Knowledge-enhanced Transformer encoder with retrieved textual commonsense."""

from .kb import CandidateSet, CommonsenseEntry, CommonsenseKB, ingest, kb_stats, retrieve
from .model import OkEncoder, adapt_from_pretrained, encode_commonsense, integrate, ok_encode, t1_layer_forward
from .tensor import Tape, Tensor, backward, finite_diff_check, no_grad
from .training import TaskModel, TaskSpec, TrainConfig, adamw_step, classify, mc_score, mlm_score, train
from .transformer import ModelConfig, VanillaEncoder, Vocabulary, encode, tokenize

__all__ = [
    "CandidateSet", "CommonsenseEntry", "CommonsenseKB", "ModelConfig", "OkEncoder", "Tape", "TaskModel",
    "TaskSpec", "Tensor", "TrainConfig", "VanillaEncoder", "Vocabulary", "adamw_step", "adapt_from_pretrained",
    "backward", "classify", "encode", "encode_commonsense", "finite_diff_check", "ingest", "integrate",
    "kb_stats", "mc_score", "mlm_score", "no_grad", "ok_encode", "retrieve", "t1_layer_forward", "tokenize",
    "train",
]
