"""Dense reference implementations and the scaling benchmark harness.

Every reference here recomputes the model math directly in numpy — full
attention matrices, the uncompressed span tensor, per-cell plus-shaped
attention — so the banded production paths can be checked against an
independent arithmetic route. Dense forms are guarded by a size cap and are
only for tests and benchmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import tensor as T
from .config import RunConfig
from .decoding import SpanPrediction, conflicts
from .encoder import Encoder, logn_factor
from .instrument import METER
from .model import SpanModel
from .spans import BandTensor, band_geometry

DENSE_CAP = 64


class OracleLimitError(ValueError):
    pass


def _check_cap(L: int, limit: int) -> None:
    if L > limit:
        raise OracleLimitError(f"dense oracle invoked at L={L}, above the cap {limit}")


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _softmax_masked(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, scores, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e[~mask] = 0.0
    return e / e.sum(axis=-1, keepdims=True)


def _rope(x: np.ndarray, pos: np.ndarray, base: float) -> np.ndarray:
    c = x.shape[-1]
    theta = base ** (-2.0 * np.arange(c // 2) / c)
    ang = pos[..., None] * theta
    cos, sin = np.cos(ang), np.sin(ang)
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
    out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
    return out


def _effective(layer, which: str) -> np.ndarray:
    """Base projection with any adapter folded in (merged form)."""
    base = getattr(layer, f"w_{which}").data
    ad = getattr(layer, f"lora_{which}", None)
    if ad is not None:
        base = base + ad.scale * (ad.down.data @ ad.up.data)
    return base


def dense_encoder(token_ids: np.ndarray, encoder: Encoder,
                  mask: np.ndarray | None = None, limit: int = DENSE_CAP) -> np.ndarray:
    """Full-attention reference encoder sharing the banded encoder's weights.

    ``mask`` defaults to all-true; pass an arrow mask's dense form to check
    the banded path at arbitrary window sizes.
    """
    ids = np.asarray(token_ids)
    L = ids.shape[0]
    _check_cap(L, limit)
    cfg = encoder.cfg
    H, dh = cfg.heads, cfg.d // cfg.heads
    factor = logn_factor(L, cfg.logn_base) if L >= 2 else 1.0
    mask = np.ones((L, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    x = encoder.tok_emb.data[ids] + encoder.pos_emb.data[:L]
    for layer in encoder.layers:
        q = x @ _effective(layer, "q") + layer.b_q.data
        k = x @ layer.w_k.data + layer.b_k.data
        v = x @ _effective(layer, "v") + layer.b_v.data
        qh = q.reshape(L, H, dh).transpose(1, 0, 2)
        kh = k.reshape(L, H, dh).transpose(1, 0, 2)
        vh = v.reshape(L, H, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
        scores[:, 0, :] *= factor
        METER.add_pairs("dense_encoder", H * L * L)
        probs = _softmax_masked(scores, np.broadcast_to(mask, (H, L, L)))
        att = (probs @ vh).transpose(1, 0, 2).reshape(L, cfg.d)
        x = _layer_norm(x + att @ layer.w_o.data + layer.b_o.data, layer.ln1_g.data, layer.ln1_b.data)
        f = _gelu(x @ layer.ffn_w1.data + layer.ffn_b1.data) @ layer.ffn_w2.data + layer.ffn_b2.data
        x = _layer_norm(x + f, layer.ln2_g.data, layer.ln2_b.data)
    return x


def dense_heads(Hc: np.ndarray, scorer) -> tuple[np.ndarray, np.ndarray]:
    hs = _gelu(Hc @ scorer.start_w1.data + scorer.start_b1.data) @ scorer.start_w2.data + scorer.start_b2.data
    he = _gelu(Hc @ scorer.end_w1.data + scorer.end_b1.data) @ scorer.end_w2.data + scorer.end_b2.data
    return hs, he


def dense_biaffine(hs: np.ndarray, he: np.ndarray, scorer, limit: int = DENSE_CAP) -> np.ndarray:
    L, d = hs.shape
    _check_cap(L, limit)
    out = np.einsum("id,dcf,jf->ijc", hs, scorer.w1.data, he)
    out += (hs @ scorer.w2.data[:, :d].T)[:, None, :]
    out += (he @ scorer.w2.data[:, d:].T)[None, :, :]
    out += scorer.b.data
    return out


def _dense_row_attention(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                         pos: np.ndarray, base: float) -> np.ndarray:
    """Per-row softmax attention over an [L, n, c] stack with rotary positions."""
    c = x.shape[-1]
    q = _rope(x @ wq, pos, base)
    k = _rope(x @ wk, pos, base)
    v = x @ wv
    scores = np.einsum("ijc,ikc->ijk", q, k) / math.sqrt(c)
    METER.add_pairs("dense_plus", scores.size)
    probs = _softmax_masked(scores, np.ones(scores.shape, dtype=bool))
    return np.einsum("ijk,ikc->ijc", probs, v)


def dense_shear_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution in band coordinates evaluated on the square tensor.

    The band grid's (row, offset) neighborhood maps to square cells
    (i + di, j + di + dk); cells outside the matrix contribute zero.
    """
    L = x.shape[0]
    out = np.broadcast_to(bias, (L, L, bias.shape[0])).copy()
    for di in (-1, 0, 1):
        for dk in (-1, 0, 1):
            dj = di + dk
            w = kernel[:, :, di + 1, dk + 1]
            i0, i1 = max(0, -di), L - max(0, di)
            j0, j1 = max(0, -dj), L - max(0, dj)
            if i0 >= i1 or j0 >= j1:
                continue
            out[i0:i1, j0:j1] += x[i0 + di:i1 + di, j0 + dj:j1 + dj] @ w.T
    return out


def dense_plus_block(S: np.ndarray, block) -> np.ndarray:
    """One plus-shaped block on the uncompressed [L, L, c] tensor."""
    L = S.shape[0]
    upper = np.arange(L)[:, None] <= np.arange(L)[None, :]
    marked = S + np.where(upper[:, :, None], block.pos_table.data[0], block.pos_table.data[1])
    col = np.broadcast_to(np.arange(L)[None, :], (L, L))
    zh = _dense_row_attention(marked, block.wq_h.data, block.wk_h.data, block.wv_h.data,
                              col, block.rope_base)
    mt = marked.transpose(1, 0, 2)
    zv = _dense_row_attention(mt, block.wq_v.data, block.wk_v.data, block.wv_v.data,
                              col, block.rope_base).transpose(1, 0, 2)
    cat = np.concatenate([zh, zv], axis=-1)
    fused = _gelu(cat @ block.fuse_w1.data + block.fuse_b1.data) @ block.fuse_w2.data + block.fuse_b2.data
    x1 = _layer_norm(S + fused, block.ln1_g.data, block.ln1_b.data)
    conv = dense_shear_conv(x1, block.conv1_k.data, block.conv1_b.data)
    conv = dense_shear_conv(_gelu(conv), block.conv2_k.data, block.conv2_b.data)
    return _layer_norm(x1 + conv, block.ln2_g.data, block.ln2_b.data)


def dense_pipeline(token_ids: np.ndarray, model: SpanModel, limit: int = DENSE_CAP) -> np.ndarray:
    """Uncompressed reference of the whole scoring path: [L-1, L-1, R].

    This is the no-band limit: with the production band covering the full
    square (m >= L-1), its valid slots must match these cells.
    """
    ids = np.asarray(token_ids)
    _check_cap(ids.shape[0], limit)
    Hfull = dense_encoder(ids, model.encoder, limit=limit)
    Hc = Hfull[1:]
    hs, he = dense_heads(Hc, model.scorer)
    S0 = dense_biaffine(hs, he, model.scorer, limit=limit)
    S = S0
    for block in model.blocks:
        S = dense_plus_block(S, block)
    x = S + S0
    return _gelu(x @ model.head_w1.data + model.head_b1.data) @ model.head_w2.data + model.head_b2.data


# ---------------------------------------------------------------------------
# band <-> square


def recover(band, m: int | None = None) -> np.ndarray:
    """Band layout to the square tensor, zeros outside the band."""
    if isinstance(band, BandTensor):
        data, L, m = band.data.data, band.L, band.m
    else:
        data = np.asarray(band)
        if m is None:
            raise ValueError("recover: m is required for raw arrays")
        L = data.shape[0]
    geo = band_geometry(L, m)
    out = np.zeros((L, L) + data.shape[2:], dtype=data.dtype)
    rows = np.repeat(np.arange(L), geo.width).reshape(L, geo.width)
    out[rows[geo.valid], geo.j_index[geo.valid]] = data[geo.valid]
    return out


def band_extract(square: np.ndarray, m: int) -> np.ndarray:
    """Inverse of :func:`recover`: pull band cells from a square tensor."""
    L = square.shape[0]
    geo = band_geometry(L, m)
    out = np.zeros((L, geo.width) + square.shape[2:], dtype=square.dtype)
    rows = np.repeat(np.arange(L), geo.width).reshape(L, geo.width)
    out[geo.valid] = square[rows[geo.valid], geo.j_index[geo.valid]]
    return out


# ---------------------------------------------------------------------------
# decoding oracle


def exhaustive_decode(candidates: list[SpanPrediction]) -> list[SpanPrediction]:
    """Best conflict-free subset by total score (exponential; <= 12 inputs)."""
    n = len(candidates)
    if n > 12:
        raise OracleLimitError(f"exhaustive_decode limited to 12 candidates, got {n}")
    order = sorted(candidates, key=lambda p: (p.start, p.end, p.type_id))
    best_total, best_subset = -1.0, []
    for bits in range(1 << n):
        subset = [order[i] for i in range(n) if bits >> i & 1]
        ok = all(not conflicts(a, b) for ai, a in enumerate(subset) for b in subset[ai + 1:])
        if ok:
            total = sum(p.score for p in subset)
            if total > best_total + 1e-12:
                best_total, best_subset = total, subset
    return sorted(best_subset, key=lambda p: (p.start, p.end, p.type_id))


# ---------------------------------------------------------------------------
# scaling benchmark


@dataclass
class BenchRecord:
    L: int
    w: int
    m: int
    variant: str  # "banded" or "full" (uncompressed window)
    peak_bytes: int
    wall_seconds: float
    flop_count: int  # attention score pairs evaluated
    encoder_pairs: int = 0
    span_peak_bytes: int = 0


def _bench_model(L: int, w: int, m: int, d: int, heads: int, c: int, blocks: int,
                 vocab_size: int, seed: int) -> SpanModel:
    from .config import BispaConfig, DataConfig, DecodeConfig, EncoderConfig, SpanConfig, TrainConfig

    cfg = RunConfig(
        encoder=EncoderConfig(d=d, heads=heads, layers=1, window=w, max_len=L + 1),
        span=SpanConfig(band_halfwidth=m, channels=c),
        bispa=BispaConfig(blocks=blocks),
        train=TrainConfig(seed=seed),
        decode=DecodeConfig(),
        data=DataConfig(),
    )
    return SpanModel(cfg, vocab_size, cls_id=0, n_types=2, seed=seed)


def bench(L_list: list[int], w: int, m: int, d: int = 64, heads: int = 4, c: int = 32,
          blocks: int = 1, seed: int = 0, dense_cap: int = DENSE_CAP,
          repeats: int = 1) -> list[BenchRecord]:
    """Run the banded path at each L, plus the uncompressed (full-window)
    variant where it fits under the cap; record allocation peaks and
    attention-pair counters."""
    records = []
    rng = np.random.default_rng(seed)
    vocab_size = 32
    for L in L_list:
        ids = np.concatenate([[0], rng.integers(4, vocab_size, size=L)])
        variants = [("banded", w, m)]
        if L <= dense_cap:
            variants.append(("full", L, L))
        for variant, vw, vm in variants:
            model = _bench_model(L + 1, vw, vm, d, heads, c, blocks, vocab_size, seed)
            best = None
            for _ in range(max(1, repeats)):
                METER.reset_pairs()
                with T.no_grad():
                    with METER.stage(f"{variant}-L{L}") as st:
                        Hfull = model.encoder.encode(ids)
                        enc_pairs = st.pairs_by_tag.get("encoder", 0)
                        with METER.stage("span") as st_span:
                            Hc = T.take_rows(Hfull, np.arange(1, L + 1))
                            hs, he = model.scorer.start_end_heads(Hc)
                            S = model.scorer.biaffine_band(hs, he, model.m)
                            from .band_attention import stack_blocks
                            S2 = stack_blocks(S, model.blocks)
                            del S, S2
                rec = BenchRecord(L=L, w=vw, m=vm, variant=variant,
                                  peak_bytes=st.peak_bytes, wall_seconds=st.wall_seconds,
                                  flop_count=st.score_pairs, encoder_pairs=enc_pairs,
                                  span_peak_bytes=st_span.peak_bytes)
                if best is None or rec.wall_seconds < best.wall_seconds:
                    best = rec
            records.append(best)
    return records


def format_bench_table(records: list[BenchRecord]) -> str:
    header = f"{'L':>6} {'w':>5} {'m':>5} {'variant':>8} {'peak_bytes':>12} {'wall_seconds':>13} {'flop_count':>12}"
    lines = [header, "-" * len(header)]
    for r in records:
        lines.append(f"{r.L:>6} {r.w:>5} {r.m:>5} {r.variant:>8} {r.peak_bytes:>12} "
                     f"{r.wall_seconds:>13.4f} {r.flop_count:>12}")
    return "\n".join(lines)
