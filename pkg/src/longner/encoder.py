"""Transformer encoder over an arrow-shaped sparse attention pattern.

Position 0 is the [CLS] slot: it attends to all positions and all positions
attend back to it; every other query/key pair must lie within a diagonal
window of half-width ``w``. The [CLS] query row's logits are additionally
scaled by log_base(L) so its softmax entropy stays stable as the input
length varies. Work and memory are Theta(w * L); the quadratic dense form
exists only as a test oracle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .config import EncoderConfig
from .instrument import METER
from .tensor import Tensor


def logn_factor(length: int, base: float = 512.0) -> float:
    """log_base(length), the [CLS]-row logit scale; clamped below length 2."""
    if length < 2:
        warnings.warn(f"logn_factor: length {length} < 2, clamping to log of 2")
        length = 2
    return math.log(length) / math.log(base)


@dataclass(frozen=True)
class AttentionMask:
    """Arrow-shaped mask predicate: row 0 and column 0 are dense, the rest banded."""
    L: int
    w: int

    def allowed(self, q: int, k: int) -> bool:
        return q == 0 or k == 0 or abs(q - k) <= self.w

    def to_dense(self) -> np.ndarray:
        idx = np.arange(self.L)
        band = np.abs(idx[:, None] - idx[None, :]) <= self.w
        band[0, :] = True
        band[:, 0] = True
        return band

    @property
    def num_allowed(self) -> int:
        total = self.L  # row 0
        for q in range(1, self.L):
            lo = max(1, q - self.w)
            hi = min(self.L - 1, q + self.w)
            total += (hi - lo + 1) + 1  # band slots plus the [CLS] key
        return total


def build_arrow_mask(L: int, w: int) -> AttentionMask:
    if L < 1:
        raise ValueError(f"sequence length must be >= 1, got {L}")
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    return AttentionMask(L=L, w=w)


@lru_cache(maxsize=64)
def arrow_indices(L: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Gather layout for non-[CLS] rows: slot 0 is the [CLS] key, slots
    1..2w+1 are the window positions q-w..q+w; out-of-range window slots
    (including position 0, already covered by slot 0) are invalid."""
    q = np.arange(1, L)[:, None]
    offs = np.arange(-w, w + 1)[None, :]
    pos = q + offs
    valid_win = (pos >= 1) & (pos < L)
    idx = np.concatenate([np.zeros((L - 1, 1), dtype=np.int64),
                          np.clip(pos, 0, L - 1)], axis=1)
    valid = np.concatenate([np.ones((L - 1, 1), dtype=bool), valid_win], axis=1)
    idx.setflags(write=False)
    valid.setflags(write=False)
    return idx, valid


@dataclass
class LoraAdapter:
    down: Tensor  # [d, r]
    up: Tensor  # [r, d], zero-initialized so the adapter starts as identity
    alpha: float
    rank: int

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape: tuple, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape: tuple, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class EncoderLayer:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype):
        d = cfg.d
        self.cfg = cfg
        self.w_q = _uniform(rng, (d, d), d, dtype)
        self.b_q = _zeros((d,), dtype)
        self.w_k = _uniform(rng, (d, d), d, dtype)
        self.b_k = _zeros((d,), dtype)
        self.w_v = _uniform(rng, (d, d), d, dtype)
        self.b_v = _zeros((d,), dtype)
        self.w_o = _uniform(rng, (d, d), d, dtype)
        self.b_o = _zeros((d,), dtype)
        self.ln1_g = _ones((d,), dtype)
        self.ln1_b = _zeros((d,), dtype)
        hidden = 4 * d
        self.ffn_w1 = _uniform(rng, (d, hidden), d, dtype)
        self.ffn_b1 = _zeros((hidden,), dtype)
        self.ffn_w2 = _uniform(rng, (hidden, d), hidden, dtype)
        self.ffn_b2 = _zeros((d,), dtype)
        self.ln2_g = _ones((d,), dtype)
        self.ln2_b = _zeros((d,), dtype)
        self.lora_q: LoraAdapter | None = None
        self.lora_v: LoraAdapter | None = None

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                     "ln1_g", "ln1_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
                     "ln2_g", "ln2_b"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        for tag, ad in (("lora_q", self.lora_q), ("lora_v", self.lora_v)):
            if ad is not None:
                out[f"{prefix}.{tag}.down"] = ad.down
                out[f"{prefix}.{tag}.up"] = ad.up
        return out

    def _project(self, x: Tensor, w: Tensor, b: Tensor, adapter: LoraAdapter | None) -> Tensor:
        out = T.linear(x, w, b)
        if adapter is not None:
            out = T.add(out, T.mul_scalar(T.matmul(T.matmul(x, adapter.down), adapter.up), adapter.scale))
        return out

    def attention(self, x: Tensor, cls_scale: float) -> Tensor:
        L, d = x.shape
        H = self.cfg.heads
        dh = d // H
        inv = 1.0 / math.sqrt(dh)
        q = self._project(x, self.w_q, self.b_q, self.lora_q)
        k = T.linear(x, self.w_k, self.b_k)
        v = self._project(x, self.w_v, self.b_v, self.lora_v)
        q3 = T.reshape(q, (L, H, dh))
        k3 = T.reshape(k, (L, H, dh))
        v3 = T.reshape(v, (L, H, dh))

        # [CLS] query row: dense over all keys, logits scaled by log_base(L)
        qc = T.transpose(T.take_rows(q3, np.arange(1)), (1, 0, 2))  # [H, 1, dh]
        kt = T.transpose(k3, (1, 2, 0))  # [H, dh, L]
        sc = T.mul_scalar(T.matmul(qc, kt), cls_scale * inv)  # [H, 1, L]
        ac = T.masked_softmax(sc, np.ones(sc.shape, dtype=bool))
        vc = T.transpose(v3, (1, 0, 2))  # [H, L, dh]
        oc = T.reshape(T.transpose(T.matmul(ac, vc), (1, 0, 2)), (1, d))
        METER.add_pairs("encoder", H * L)
        if L == 1:
            return T.linear(oc, self.w_o, self.b_o)

        # remaining rows: gathered window keys plus the [CLS] key
        idx, valid = arrow_indices(L, self.cfg.window)
        S = idx.shape[1]
        qr = T.reshape(T.transpose(T.take_rows(q3, np.arange(1, L)), (1, 0, 2)), (H, L - 1, 1, dh))
        kg = T.transpose(T.take_rows(k3, idx), (2, 0, 3, 1))  # [H, L-1, dh, S]
        sr = T.reshape(T.mul_scalar(T.matmul(qr, kg), inv), (H, L - 1, S))
        ar = T.masked_softmax(sr, np.broadcast_to(valid[None, :, :], (H, L - 1, S)))
        vg = T.transpose(T.take_rows(v3, idx), (2, 0, 1, 3))  # [H, L-1, S, dh]
        orows = T.matmul(T.reshape(ar, (H, L - 1, 1, S)), vg)  # [H, L-1, 1, dh]
        orows = T.reshape(T.transpose(orows, (1, 0, 3, 2)), (L - 1, d))
        METER.add_pairs("encoder", H * (L - 1) * S)

        out = T.concat([oc, orows], axis=0)
        return T.linear(out, self.w_o, self.b_o)

    def forward(self, x: Tensor, cls_scale: float) -> Tensor:
        a = self.attention(x, cls_scale)
        x = T.layer_norm(T.add(x, a), self.ln1_g, self.ln1_b)
        f = T.linear(T.gelu(T.linear(x, self.ffn_w1, self.ffn_b1)), self.ffn_w2, self.ffn_b2)
        return T.layer_norm(T.add(x, f), self.ln2_g, self.ln2_b)


class Encoder:
    """Token + learned position embeddings feeding arrow-attention layers."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int, cls_id: int,
                 rng: np.random.Generator, dtype=None):
        cfg.validate()
        dtype = T.get_default_dtype() if dtype is None else dtype
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.cls_id = cls_id
        self.tok_emb = _uniform(rng, (vocab_size, cfg.d), cfg.d, dtype)
        self.pos_emb = _uniform(rng, (cfg.max_len, cfg.d), cfg.d, dtype)
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.layers)]

    def params(self) -> dict[str, Tensor]:
        out = {"encoder.tok_emb": self.tok_emb, "encoder.pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"encoder.l{i}"))
        return out

    def encode(self, token_ids: np.ndarray, train: bool = False) -> Tensor:
        token_ids = np.asarray(token_ids)
        L = token_ids.shape[0]
        if L < 1:
            raise ValueError("encode: empty input")
        if token_ids[0] != self.cls_id:
            raise ValueError(f"encode: input must start with the [CLS] id {self.cls_id}")
        if L > self.cfg.max_len:
            raise ValueError(
                f"encode: length {L} exceeds max_len {self.cfg.max_len}; split the document into segments")
        cls_scale = logn_factor(L, self.cfg.logn_base) if L >= 2 else 1.0
        x = T.add(T.take_rows(self.tok_emb, token_ids), T.take_rows(self.pos_emb, np.arange(L)))
        for layer in self.layers:
            x = layer.forward(x, cls_scale)
        return x

    # ------------------------------------------------------------------
    # low-rank adapters on the Q and V projections

    def attach_lora(self, layer_index: int, rank: int, alpha: float,
                    rng: np.random.Generator, freeze_base: bool = True) -> None:
        if rank < 1:
            raise ValueError(f"lora rank must be >= 1, got {rank}")
        layer = self.layers[layer_index]
        if layer.lora_q is not None or layer.lora_v is not None:
            raise ValueError(f"layer {layer_index} already has adapters attached")
        d = self.cfg.d
        dtype = layer.w_q.data.dtype
        for attr, base in (("lora_q", layer.w_q), ("lora_v", layer.w_v)):
            down = _uniform(rng, (d, rank), d, dtype)
            up = _zeros((rank, d), dtype)
            setattr(layer, attr, LoraAdapter(down=down, up=up, alpha=alpha, rank=rank))
            if freeze_base:
                base.requires_grad = False

    def merge_lora(self, layer_index: int) -> None:
        """Fold adapters into the base projections and drop them; the merged
        forward matches the adapter forward to rounding."""
        layer = self.layers[layer_index]
        if layer.lora_q is None and layer.lora_v is None:
            raise ValueError(f"layer {layer_index} has no adapters to merge")
        for attr, base in (("lora_q", layer.w_q), ("lora_v", layer.w_v)):
            ad: LoraAdapter | None = getattr(layer, attr)
            if ad is None:
                continue
            base.data = base.data + ad.scale * (ad.down.data @ ad.up.data)
            setattr(layer, attr, None)


def word_spans_for_tokens(n_tokens: int) -> list[tuple[int, int]]:
    """Single-token words over model positions 1..n_tokens (position 0 is [CLS])."""
    return [(p, p) for p in range(1, n_tokens + 1)]


def apply_wwm(token_ids: np.ndarray, word_spans: list[tuple[int, int]], mask_prob: float,
              rng: np.random.Generator, mask_id: int) -> tuple[np.ndarray, list[int]]:
    """Whole-word input corruption: each word is masked as a unit.

    ``word_spans`` must partition positions 1..L-1 with inclusive bounds;
    position 0 ([CLS]) is never masked. Returns the corrupted copy and the
    masked positions. Supervision targets are unaffected: this corrupts
    inputs for robustness, it is not a masked-LM objective.
    """
    token_ids = np.asarray(token_ids)
    L = token_ids.shape[0]
    covered = np.zeros(L, dtype=bool)
    covered[0] = True
    for s, e in word_spans:
        if not (1 <= s <= e < L):
            raise ValueError(f"word span ({s}, {e}) outside positions 1..{L - 1}")
        if covered[s:e + 1].any():
            raise ValueError(f"word span ({s}, {e}) overlaps another word")
        covered[s:e + 1] = True
    if not covered.all():
        raise ValueError("word spans must cover every position except [CLS]")
    out = token_ids.copy()
    masked: list[int] = []
    for s, e in word_spans:
        if rng.random() < mask_prob:
            out[s:e + 1] = mask_id
            masked.extend(range(s, e + 1))
    return out, masked
