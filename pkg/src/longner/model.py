"""Full model: encoder -> span heads -> banded scorer -> plus blocks -> logits.

The span grid covers content tokens only; [CLS] contributes context through
attention but is never a span endpoint. An input of L token ids (position 0
being [CLS]) therefore yields a [L-1, 2m+1, R] band of logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .band_attention import PlusBlock, stack_blocks
from .config import RunConfig
from .data import Segment
from .encoder import Encoder
from .spans import BandTensor, SpanScorer, band_geometry, band_validity
from .tensor import Tensor


@dataclass
class LabelBand:
    """{0,1} targets in band layout, mirrored into both triangles."""
    targets: np.ndarray  # [L, 2m+1, R]
    validity: np.ndarray  # [L, 2m+1]
    dropped_count: int  # gold spans longer than m+1 tokens, left unsupervised


def build_labels(seg: Segment, m: int, n_types: int) -> LabelBand:
    """Mark gold spans in both band triangles.

    Entity (i, j, r) with j - i <= m sets the upper slot (i, m + (j-i)) and
    the mirrored lower slot (j, m - (j-i)). Longer entities are counted in
    ``dropped_count`` and otherwise ignored (never truncated).
    """
    L = len(seg.tokens)
    W = 2 * m + 1
    targets = np.zeros((L, W, n_types), dtype=np.float64)
    dropped = 0
    for e in seg.entities:
        span = e.end - e.start
        if span > m:
            dropped += 1
            continue
        targets[e.start, m + span, e.type_id] = 1.0
        targets[e.end, m - span, e.type_id] = 1.0
    return LabelBand(targets=targets, validity=band_validity(L, m).copy(), dropped_count=dropped)


class SpanModel:
    def __init__(self, cfg: RunConfig, vocab_size: int, cls_id: int, n_types: int,
                 seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.n_types = n_types
        self.m = cfg.span.band_halfwidth
        rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
        dtype = T.get_default_dtype()
        self.encoder = Encoder(cfg.encoder, vocab_size, cls_id, rng, dtype)
        self.scorer = SpanScorer(cfg.encoder.d, cfg.channels, rng, dtype)
        self.blocks = [PlusBlock(cfg.channels, rng, cfg.bispa.rope_base, dtype)
                       for _ in range(cfg.bispa.blocks)]
        c = cfg.channels
        bound = 1.0 / np.sqrt(c)
        self.head_w1 = Tensor(rng.uniform(-bound, bound, (c, c)).astype(dtype), requires_grad=True)
        self.head_b1 = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.head_w2 = Tensor(rng.uniform(-bound, bound, (c, n_types)).astype(dtype), requires_grad=True)
        self.head_b2 = Tensor(np.zeros(n_types, dtype=dtype), requires_grad=True)
        if cfg.encoder.lora_rank > 0:
            for i in range(len(self.encoder.layers)):
                self.encoder.attach_lora(i, cfg.encoder.lora_rank, cfg.encoder.lora_alpha,
                                         rng, freeze_base=cfg.encoder.lora_freeze_base)

    def params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params())
        out.update(self.scorer.params("scorer"))
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"block{i}"))
        out.update({"head.w1": self.head_w1, "head.b1": self.head_b1,
                    "head.w2": self.head_w2, "head.b2": self.head_b2})
        return out

    def forward_scores(self, token_ids: np.ndarray, train: bool = False) -> tuple[Tensor, np.ndarray]:
        """Band logits for one [CLS]-prefixed id sequence.

        Returns ([L-1, 2m+1, R] logits, validity mask) where L-1 counts the
        content tokens.
        """
        token_ids = np.asarray(token_ids)
        if token_ids.shape[0] < 2:
            raise ValueError("forward_scores: need [CLS] plus at least one content token")
        H = self.encoder.encode(token_ids, train=train)
        Lc = token_ids.shape[0] - 1
        Hc = T.take_rows(H, np.arange(1, Lc + 1))
        hs, he = self.scorer.start_end_heads(Hc)
        S = self.scorer.biaffine_band(hs, he, self.m)
        S2 = stack_blocks(S, self.blocks)
        x = T.add(S2.data, S.data)
        logits = T.linear(T.gelu(T.linear(x, self.head_w1, self.head_b1)), self.head_w2, self.head_b2)
        return logits, S.validity

    def loss(self, logits: Tensor, labels: LabelBand) -> Tensor:
        """Mean sigmoid binary cross-entropy over valid slots x types.

        Both triangles carry supervision; invalid slots are excluded.
        """
        mask = np.broadcast_to(labels.validity[:, :, None], logits.shape)
        targets = labels.targets.astype(logits.data.dtype)
        return T.bce_with_logits(logits, targets, mask)
