"""Nested elastic hybrid Mamba/attention/FFN language model.

One checkpoint holds a full model plus budget-conditioned routers; smaller
sub-networks are prefixes of its importance-sorted parameters and can be
sliced out without retraining.
"""
from .autograd import Tensor, backward, grad_check, no_grad
from .importance import ImportanceRanking, apply_ranking, calibrate, rank_depth
from .model import HybridModel, MaskSet, ModelConfig, stack_forward
from .router import BudgetSpec, CostModel, RouterBank, Selection, cost_param_count, decode
from .slicing import extract_submodel, load, save, verify_equivalence
from .training import TrainConfig, train

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "ImportanceRanking", "apply_ranking", "calibrate", "rank_depth",
    "HybridModel", "MaskSet", "ModelConfig", "stack_forward",
    "BudgetSpec", "CostModel", "RouterBank", "Selection", "cost_param_count", "decode",
    "extract_submodel", "load", "save", "verify_equivalence",
    "TrainConfig", "train",
]
