"""Dual-space antonym/synonym classification over frozen word embeddings."""

from .data import EmbeddingTable, LabeledPair, load_embeddings, load_pairs
from .graph import PairGraph, build_graph, graph_stats
from .model import HyperParams, ModelParams, forward_batch, load_checkpoint, save_checkpoint
from .objective import LossBreakdown, bce_loss, margin_loss, total_loss
from .tensor import GradTape, Rng, Tensor, grad_check
from .train import EvalReport, evaluate, predict, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "EmbeddingTable", "EvalReport", "GradTape", "HyperParams", "LabeledPair", "LossBreakdown",
    "ModelParams", "PairGraph", "Rng", "Tensor", "bce_loss", "build_graph", "evaluate",
    "forward_batch", "grad_check", "graph_stats", "load_checkpoint", "load_embeddings",
    "load_pairs", "margin_loss", "predict", "save_checkpoint", "sgd_step", "total_loss", "train",
]
