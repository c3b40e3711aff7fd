"""Start/end heads and the bilinear span scorer in a diagonal-band layout.

An L-token grid induces an L x L matrix of (start, end) cells. Only cells
with |end - start| <= m are materialized: slot (i, k) of the [L, 2m+1, c]
band stores matrix cell (i, j) with j = i + k - m. Slots at k >= m are the
"upper" cells (spans running forward from i, diagonal included); slots at
k < m mirror the lower triangle. Invalid slots (j outside [0, L)) hold
zeros and are excluded from attention and loss downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor


def band_width(m: int) -> int:
    return 2 * m + 1


@dataclass(frozen=True)
class BandGeometry:
    L: int
    m: int
    j_index: np.ndarray  # [L, W] target column per slot, clamped into range
    valid: np.ndarray  # [L, W] slot validity (0 <= i + k - m < L)
    upper_h: np.ndarray  # [W] slot holds an upper-triangle cell (k >= m)
    upper_v: np.ndarray  # [W] same question for the column-major layout (k <= m)
    skew_src: np.ndarray  # [L*W] flat source index of the row<->column re-indexing

    @property
    def width(self) -> int:
        return band_width(self.m)


@lru_cache(maxsize=256)
def band_geometry(L: int, m: int) -> BandGeometry:
    W = band_width(m)
    rows = np.arange(L)[:, None]
    slots = np.arange(W)[None, :]
    j = rows + slots - m
    valid = (j >= 0) & (j < L)
    j_clamped = np.clip(j, 0, L - 1)
    # re-indexing between row-major and column-major band layouts:
    # out[r, s] = in[r + s - m, 2m - s]; the map is an involution and the
    # validity predicate is preserved by it
    src_row = rows + slots - m
    src_slot = 2 * m - slots
    flat = np.where(valid, np.clip(src_row, 0, L - 1) * W + src_slot, 0)
    for arr in (j_clamped, valid, flat):
        arr.setflags(write=False)
    upper_h = (np.arange(W) >= m)
    upper_v = (np.arange(W) <= m)
    upper_h.setflags(write=False)
    upper_v.setflags(write=False)
    return BandGeometry(L=L, m=m, j_index=j_clamped, valid=valid,
                        upper_h=upper_h, upper_v=upper_v, skew_src=flat.reshape(-1))


def band_validity(L: int, m: int) -> np.ndarray:
    return band_geometry(L, m).valid


@dataclass
class BandTensor:
    """Band-layout values plus the slot-validity mask."""
    data: Tensor  # [L, 2m+1, c]
    L: int
    m: int
    validity: np.ndarray  # [L, 2m+1] bool

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def width(self) -> int:
        return band_width(self.m)

    def check(self) -> None:
        W = band_width(self.m)
        assert self.data.shape[:2] == (self.L, W), (self.data.shape, self.L, W)
        assert self.validity.shape == (self.L, W)
        assert np.array_equal(self.validity, band_validity(self.L, self.m))
        invalid = ~self.validity
        if invalid.any():
            assert np.all(self.data.data[invalid] == 0.0), "invalid slots must stay zero"


def zero_invalid(x: Tensor, validity: np.ndarray) -> Tensor:
    return T.mul_const(x, validity.astype(x.data.dtype)[..., None])


class SpanScorer:
    """Start/end MLP heads plus the bilinear + linear span feature map."""

    def __init__(self, d: int, c: int, rng: np.random.Generator, dtype=None):
        dtype = T.get_default_dtype() if dtype is None else dtype
        self.d = d
        self.c = c

        def u(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        def z(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        self.start_w1 = u((d, d), d)
        self.start_b1 = z((d,))
        self.start_w2 = u((d, d), d)
        self.start_b2 = z((d,))
        self.end_w1 = u((d, d), d)
        self.end_b1 = z((d,))
        self.end_w2 = u((d, d), d)
        self.end_b2 = z((d,))
        self.w1 = u((d, c, d), d)  # bilinear form, contracted on both sides
        self.w2 = u((c, 2 * d), 2 * d)  # linear term over start (+) end concat
        self.b = z((c,))

    def params(self, prefix: str = "scorer") -> dict[str, Tensor]:
        names = ("start_w1", "start_b1", "start_w2", "start_b2",
                 "end_w1", "end_b1", "end_w2", "end_b2", "w1", "w2", "b")
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def start_end_heads(self, H: Tensor) -> tuple[Tensor, Tensor]:
        hs = T.linear(T.gelu(T.linear(H, self.start_w1, self.start_b1)), self.start_w2, self.start_b2)
        he = T.linear(T.gelu(T.linear(H, self.end_w1, self.end_b1)), self.end_w2, self.end_b2)
        return hs, he

    def biaffine_band(self, hs: Tensor, he: Tensor, m: int) -> BandTensor:
        """Span features for every band slot; never materializes the square.

        For valid slot (i, k) with j = i + k - m:
        feature = hs_i^T W1 he_j + W2 (hs_i ++ he_j) + b.
        """
        if m < 1:
            raise ValueError(f"band half-width must be >= 1, got {m}")
        L, d = hs.shape
        c = self.c
        geo = band_geometry(L, m)
        W = geo.width
        # bilinear term: U[i] = hs_i^T W1 -> [L, c, d], then contract with
        # the gathered end vectors of each slot
        U = T.reshape(T.matmul(hs, T.reshape(self.w1, (d, c * d))), (L, c, d))
        he_g = T.take_rows(he, geo.j_index)  # [L, W, d]
        bil = T.transpose(T.matmul(U, T.transpose(he_g, (0, 2, 1))), (0, 2, 1))  # [L, W, c]
        # linear term, split over the two concat halves
        w2t = T.transpose(self.w2, (1, 0))  # [2d, c]
        lin_s = T.matmul(hs, T.take_rows(w2t, np.arange(d)))  # [L, c]
        lin_e = T.matmul(he, T.take_rows(w2t, np.arange(d, 2 * d)))  # [L, c]
        out = T.add(bil, T.broadcast_to(T.reshape(lin_s, (L, 1, c)), (L, W, c)))
        out = T.add(out, T.take_rows(lin_e, geo.j_index))
        out = T.add(out, T.broadcast_to(T.reshape(self.b, (1, 1, c)), (L, W, c)))
        out = zero_invalid(out, geo.valid)
        return BandTensor(data=out, L=L, m=m, validity=geo.valid)

    def biaffine_dense(self, hs: Tensor, he: Tensor, limit: int = 64) -> np.ndarray:
        """Reference dense form [L, L, c]; capped so production paths cannot
        accidentally go quadratic. Plain-numpy, test use only."""
        L = hs.shape[0]
        if L > limit:
            raise ValueError(f"biaffine_dense: L={L} exceeds the oracle cap {limit}")
        a, e = hs.data, he.data
        out = np.einsum("id,dcf,jf->ijc", a, self.w1.data, e)
        out += np.einsum("cd,id->ic", self.w2.data[:, :self.d], a)[:, None, :]
        out += np.einsum("cd,jd->jc", self.w2.data[:, self.d:], e)[None, :, :]
        out += self.b.data
        return out
