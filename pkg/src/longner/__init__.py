"""Span-based named entity recognition for long texts in banded memory.

The encoder restricts attention to an arrow pattern (a dense first row and
column for the [CLS] context sink, a diagonal window for everything else)
with a log-length rescaling of the [CLS] logits. Span features live in a
diagonal-band tensor that is attended along rows and columns, convolved,
and read out as per-type logits; decoding averages mirrored band slots and
resolves boundary conflicts greedily. Dense numpy re-implementations of
every stage act as test oracles, and an allocation/flop meter backs the
scaling benchmarks.
"""

from .config import RunConfig, load_config
from .data import Document, Entity, Segment, Vocab, gen_synthetic, load_jsonl, segment
from .decoding import SpanPrediction, micro_prf
from .model import SpanModel, build_labels
from .tensor import Tensor, no_grad, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "Document", "Entity", "Segment", "Vocab",
    "gen_synthetic", "load_jsonl", "segment", "SpanPrediction", "micro_prf",
    "SpanModel", "build_labels", "Tensor", "no_grad", "set_default_dtype",
    "__version__",
]
