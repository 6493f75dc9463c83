"""Differentiable knowledge-graph question answering.

Entity resolution and multi-hop relation following are trained jointly from
(question, answer set) pairs over a reified sparse knowledge graph.
"""

from .data import Dataset, SynthSpec, evaluate, generate_synth, load_dataset
from .estimator import KGQAEstimator
from .inference import HopDecoderParams, InferenceTrace, decode_relation, inference_backward, run_hops
from .kg import EntityVector, ReifiedKG, Triple, build_kg, follow, follow_backward, reachable_subgraph
from .model import VARIANTS, ModelParams, QAExample, QAModel
from .resolver import AliasTable, EntityFeatureIndex, build_alias_table, enumerate_spans
from .text import EmbeddingTable, encode, span_embed, tokenize
from .training import Adam, TrainConfig, bce_loss, grad_audit, train, train_step

__version__ = "0.1.0"

__all__ = [
    "Adam", "AliasTable", "Dataset", "EmbeddingTable", "EntityFeatureIndex", "EntityVector",
    "HopDecoderParams", "InferenceTrace", "KGQAEstimator", "ModelParams", "QAExample", "QAModel",
    "ReifiedKG", "SynthSpec", "TrainConfig", "Triple", "VARIANTS", "bce_loss", "build_alias_table",
    "build_kg", "decode_relation", "encode", "enumerate_spans", "evaluate", "follow", "follow_backward",
    "generate_synth", "grad_audit", "inference_backward", "load_dataset", "reachable_subgraph", "run_hops",
    "span_embed", "tokenize", "train", "train_step",
]
