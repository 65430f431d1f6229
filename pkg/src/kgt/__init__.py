"""Masked graph transformer for logical query answering over incomplete
knowledge graphs: Levi-graph encoding, mixture-of-experts layers, two-stage
masked pre-training, query fine-tuning, and filtered-rank evaluation."""

__version__ = "0.1.0"

from .graph import KnowledgeGraph, LeviGraph, SplitDataset, load_split, triple_transform
from .model import Model, ModelConfig
from .queries import QueryGraph, QueryInstance, QueryType, build_query, generate_queries, ground_answers
from .tensor import Tape, Tensor

__all__ = [
    "KnowledgeGraph",
    "LeviGraph",
    "SplitDataset",
    "load_split",
    "triple_transform",
    "Model",
    "ModelConfig",
    "QueryGraph",
    "QueryInstance",
    "QueryType",
    "build_query",
    "generate_queries",
    "ground_answers",
    "Tape",
    "Tensor",
    "__version__",
]
