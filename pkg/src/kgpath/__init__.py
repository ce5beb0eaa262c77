"""Knowledge-graph completion via path-based masked-entity pre-training.

The pipeline: load a triple store, extract two-step relation paths
(quadruples), pre-train a small Transformer encoder to recover masked
entities over triples and paths, finetune for link or relation
prediction, and score with filtered ranking metrics.
"""

from kgpath.vocab import Vocabulary
from kgpath.kg import Triple, KnowledgeGraph, FilterIndex

__version__ = "0.1.0"

__all__ = [
    "Vocabulary",
    "Triple",
    "KnowledgeGraph",
    "FilterIndex",
    "__version__",
]
