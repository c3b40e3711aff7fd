"""Banded plus-shaped attention over the span-feature band.

For matrix cell (i, j), plus-shaped attention mixes information along row i
(spans sharing a start) and column j (spans sharing an end). On the band
layout, row attention runs directly over each row's slots; column attention
first re-indexes the band so each layout row collects one matrix column
(the skew transform, an involution), attends, and maps back. A rotary
transform injects relative distances (end indices along rows, start indices
along columns), and a two-vector table marks whether a slot mirrors the
upper or lower triangle of the square.

One block = position add -> row + column attention -> fusion MLP -> residual
+ layer norm -> two 3x3 convolutions over the (row, offset) grid -> residual
+ layer norm. Attention work is Theta(L * (2m+1)^2 * c) per block.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .instrument import METER
from .spans import BandTensor, band_geometry, zero_invalid
from .tensor import Tensor


def skew_to_vertical(band: BandTensor) -> BandTensor:
    """Re-index the band so layout row j holds matrix column j.

    out[r, s] = in[r + s - m, 2m - s]; the matrix cell stored at vertical
    slot (j, k') is (i, j) with i = j + k' - m. The map is an involution and
    preserves the validity pattern, so applying it twice is the identity.
    """
    geo = band_geometry(band.L, band.m)
    W = geo.width
    c = band.channels
    flat = T.reshape(band.data, (band.L * W, c))
    out = T.reshape(T.take_rows(flat, geo.skew_src), (band.L, W, c))
    out = zero_invalid(out, geo.valid)
    return BandTensor(data=out, L=band.L, m=band.m, validity=geo.valid)


def skew_to_horizontal(band: BandTensor) -> BandTensor:
    """Inverse of :func:`skew_to_vertical` (the same involution)."""
    return skew_to_vertical(band)


def add_matrix_position(band: BandTensor, table: Tensor, layout: str = "h") -> BandTensor:
    """Add the upper/lower-triangle marker vector to every valid slot.

    ``table`` has exactly two rows: row 0 for upper-triangle slots (diagonal
    included), row 1 for lower. In the row-major layout upper means k >= m;
    in the column-major (skewed) layout it means k <= m. Adding in row
    layout and then skewing equals skewing and then adding in column layout,
    because the triangle a cell belongs to does not depend on the layout.
    """
    if table.shape[0] != 2:
        raise ValueError(f"matrix position table must have 2 rows, got {table.shape}")
    if layout not in ("h", "v"):
        raise ValueError(f"layout must be 'h' or 'v', got {layout!r}")
    geo = band_geometry(band.L, band.m)
    upper = geo.upper_h if layout == "h" else geo.upper_v
    class_idx = np.broadcast_to(np.where(upper, 0, 1), (band.L, geo.width))
    addend = T.take_rows(table, class_idx)  # [L, W, c]
    out = zero_invalid(T.add(band.data, addend), geo.valid)
    return BandTensor(data=out, L=band.L, m=band.m, validity=geo.valid)


def _band_rows_attention(band: BandTensor, wq: Tensor, wk: Tensor, wv: Tensor,
                         rope_base: float, tag: str) -> Tensor:
    """Single-head scaled dot-product attention within each layout row.

    Queries, keys and values are the projected slot vectors, scaled by
    1/sqrt(c); rotary positions are the absolute indices r + k - m of each
    slot. Invalid slots are masked out of the softmax and zeroed in the
    output. Every row has at least the diagonal slot, so no row is empty.
    """
    geo = band_geometry(band.L, band.m)
    L, W = geo.L, geo.width
    inv = 1.0 / math.sqrt(band.channels)
    q = T.rope_rotate(T.matmul(band.data, wq), geo.j_index, base=rope_base)
    k = T.rope_rotate(T.matmul(band.data, wk), geo.j_index, base=rope_base)
    v = T.matmul(band.data, wv)
    scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 2, 1))), inv)  # [L, W, W]
    METER.add_pairs(tag, L * W * W)
    att = T.masked_softmax(scores, np.broadcast_to(geo.valid[:, None, :], (L, W, W)))
    z = T.matmul(att, v)
    return zero_invalid(z, geo.valid)


def horizontal_attention(band: BandTensor, wq: Tensor, wk: Tensor, wv: Tensor,
                         rope_base: float = 10000.0) -> BandTensor:
    """Attention over each matrix row's in-band cells (rotary by end index)."""
    z = _band_rows_attention(band, wq, wk, wv, rope_base, "plus_h")
    return BandTensor(data=z, L=band.L, m=band.m, validity=band.validity)


def vertical_attention(band: BandTensor, wq: Tensor, wk: Tensor, wv: Tensor,
                       rope_base: float = 10000.0) -> BandTensor:
    """Attention over each matrix column's in-band cells (rotary by start
    index); input and output are in the row-major layout."""
    sv = skew_to_vertical(band)
    z = _band_rows_attention(sv, wq, wk, wv, rope_base, "plus_v")
    return skew_to_horizontal(BandTensor(data=z, L=band.L, m=band.m, validity=band.validity))


class PlusBlock:
    """One banded plus-shaped attention block (attention + conv interaction)."""

    def __init__(self, c: int, rng: np.random.Generator, rope_base: float = 10000.0, dtype=None):
        dtype = T.get_default_dtype() if dtype is None else dtype
        self.c = c
        self.rope_base = rope_base

        def u(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        def z(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        self.wq_h = u((c, c), c)
        self.wk_h = u((c, c), c)
        self.wv_h = u((c, c), c)
        self.wq_v = u((c, c), c)
        self.wk_v = u((c, c), c)
        self.wv_v = u((c, c), c)
        self.pos_table = z((2, c))
        self.fuse_w1 = u((2 * c, c), 2 * c)
        self.fuse_b1 = z((c,))
        self.fuse_w2 = u((c, c), c)
        self.fuse_b2 = z((c,))
        self.conv1_k = u((c, c, 3, 3), 9 * c)
        self.conv1_b = z((c,))
        self.conv2_k = u((c, c, 3, 3), 9 * c)
        self.conv2_b = z((c,))
        self.ln1_g = ones((c,))
        self.ln1_b = z((c,))
        self.ln2_g = ones((c,))
        self.ln2_b = z((c,))

    def params(self, prefix: str) -> dict[str, Tensor]:
        names = ("wq_h", "wk_h", "wv_h", "wq_v", "wk_v", "wv_v", "pos_table",
                 "fuse_w1", "fuse_b1", "fuse_w2", "fuse_b2",
                 "conv1_k", "conv1_b", "conv2_k", "conv2_b",
                 "ln1_g", "ln1_b", "ln2_g", "ln2_b")
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def fuse(self, zh: BandTensor, zv: BandTensor) -> Tensor:
        if zh.data.shape != zv.data.shape:
            raise T.ShapeError(f"fuse: shapes {zh.data.shape} vs {zv.data.shape}")
        x = T.concat([zh.data, zv.data], axis=-1)
        return T.linear(T.gelu(T.linear(x, self.fuse_w1, self.fuse_b1)), self.fuse_w2, self.fuse_b2)

    def conv_interaction(self, band: BandTensor) -> Tensor:
        """Two same-padded 3x3 convolutions over the (row, band-offset) grid.

        A 3x3 neighborhood in band coordinates is a sheared neighborhood in
        square coordinates; recovery to the square happens only at the
        oracle/benchmark boundary. Invalid slots are pinned to zero at every
        stage so they act exactly like the zero padding outside the grid and
        never leak bias into valid neighbors.
        """
        valid_img = band.validity[None, :, :].astype(band.data.data.dtype)
        x = zero_invalid(band.data, band.validity)
        img = T.transpose(x, (2, 0, 1))  # [c, L, W]
        img = T.mul_const(T.conv2d_3x3(img, self.conv1_k, self.conv1_b), valid_img)
        img = T.gelu(img)
        img = T.conv2d_3x3(img, self.conv2_k, self.conv2_b)
        out = T.transpose(img, (1, 2, 0))
        return zero_invalid(out, band.validity)

    def forward(self, band: BandTensor) -> BandTensor:
        marked = add_matrix_position(band, self.pos_table, layout="h")
        zh = horizontal_attention(marked, self.wq_h, self.wk_h, self.wv_h, self.rope_base)
        zv = vertical_attention(marked, self.wq_v, self.wk_v, self.wv_v, self.rope_base)
        fused = self.fuse(zh, zv)
        x1 = T.layer_norm(T.add(band.data, fused), self.ln1_g, self.ln1_b)
        x1 = zero_invalid(x1, band.validity)
        mid = BandTensor(data=x1, L=band.L, m=band.m, validity=band.validity)
        conv = self.conv_interaction(mid)
        x2 = T.layer_norm(T.add(x1, conv), self.ln2_g, self.ln2_b)
        x2 = zero_invalid(x2, band.validity)
        return BandTensor(data=x2, L=band.L, m=band.m, validity=band.validity)


def stack_blocks(band: BandTensor, blocks: list[PlusBlock]) -> BandTensor:
    if not blocks:
        raise ValueError("stack_blocks: need at least one block")
    for block in blocks:
        band = block.forward(band)
    return band
