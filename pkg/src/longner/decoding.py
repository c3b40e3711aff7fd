"""Symmetrized scoring, span extraction, conflict resolution, stitching, and
micro precision/recall/F1.

Decoding is pure numpy over detached score arrays. A candidate survives
conflict resolution unless it crosses an already-kept span (partial overlap)
or duplicates kept boundaries with a different type; nesting and disjoint
spans coexist freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Document, Entity, Segment


@dataclass(frozen=True)
class SpanPrediction:
    start: int
    end: int  # inclusive
    type_id: int
    score: float


def symmetrize(band_scores: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Average each upper slot with its mirrored lower slot.

    Input is the [L, 2m+1, R] logit band; output is [L, m+1, R] where entry
    (i, t) scores the span (i, i+t), plus its validity mask. Diagonal slots
    (t = 0) average with themselves.
    """
    L, W, R = band_scores.shape
    if W != 2 * m + 1:
        raise ValueError(f"symmetrize: band width {W} does not match m={m}")
    upper = band_scores[:, m:, :]  # (i, t) -> cell (i, i+t)
    spans = np.arange(m + 1)
    j = np.arange(L)[:, None] + spans[None, :]
    valid = j < L
    jc = np.minimum(j, L - 1)
    mirror = band_scores[jc, (m - spans)[None, :].repeat(L, axis=0), :]
    out = 0.5 * (upper + mirror)
    out[~valid] = 0.0
    return out, valid


def extract(sym_scores: np.ndarray, valid: np.ndarray, threshold: float = 0.0) -> list[SpanPrediction]:
    """All spans scoring above the threshold, ordered by (start, end, type)."""
    hits = np.argwhere((sym_scores > threshold) & valid[:, :, None])
    preds = [SpanPrediction(int(i), int(i + t), int(r), float(sym_scores[i, t, r]))
             for i, t, r in hits]
    preds.sort(key=lambda p: (p.start, p.end, p.type_id))
    return preds


def conflicts(a: SpanPrediction, b: SpanPrediction) -> bool:
    """Crossing boundaries, or identical boundaries with different types."""
    if a.start == b.start and a.end == b.end:
        return a.type_id != b.type_id
    if a.start < b.start <= a.end < b.end:
        return True
    if b.start < a.start <= b.end < a.end:
        return True
    return False


def resolve_conflicts(candidates: list[SpanPrediction]) -> list[SpanPrediction]:
    """Greedy by descending score (ties by ascending start/end/type); keep a
    candidate iff it conflicts with no already-kept span."""
    ranked = sorted(candidates, key=lambda p: (-p.score, p.start, p.end, p.type_id))
    kept: list[SpanPrediction] = []
    for cand in ranked:
        if all(not conflicts(cand, k) for k in kept):
            kept.append(cand)
    kept.sort(key=lambda p: (p.start, p.end, p.type_id))
    return kept


def stitch(per_segment: list[list[SpanPrediction]], segments: list[Segment],
           parent_len: int) -> list[SpanPrediction]:
    """Map segment-local predictions to document coordinates, merge exact
    duplicates keeping the best score, and re-resolve conflicts globally."""
    if len(per_segment) != len(segments):
        raise ValueError("stitch: one prediction list per segment required")
    best: dict[tuple[int, int, int], float] = {}
    for preds, seg in zip(per_segment, segments):
        for p in preds:
            start, end = p.start + seg.origin, p.end + seg.origin
            if not (0 <= start <= end < parent_len):
                raise RuntimeError(
                    f"stitch: prediction ({start}, {end}) exceeds parent bounds {parent_len}")
            key = (start, end, p.type_id)
            if key not in best or p.score > best[key]:
                best[key] = p.score
    merged = [SpanPrediction(s, e, t, sc) for (s, e, t), sc in best.items()]
    return resolve_conflicts(merged)


def micro_prf(predictions: dict[str, list], golds: dict[str, list]) -> tuple[float, float, float]:
    """Micro-averaged P/R/F1 with exact (start, end, type) matching.

    Inputs map document ids to span collections (SpanPrediction, Entity, or
    bare (start, end, type_id) triples). Zero denominators yield 0.
    """
    tp = fp = fn = 0
    for doc_id in set(predictions) | set(golds):
        pred = {_key(p) for p in predictions.get(doc_id, [])}
        gold = {_key(g) for g in golds.get(doc_id, [])}
        tp += len(pred & gold)
        fp += len(pred - gold)
        fn += len(gold - pred)
    return _prf(tp, tp + fp, tp + fn)


def prf_report(predictions: dict[str, list], golds: dict[str, list],
               labels: list[str]) -> dict[str, tuple[float, float, float]]:
    """Per-type and micro P/R/F1 over document-level span sets."""
    counts = {t: [0, 0, 0] for t in range(len(labels))}  # tp, npred, ngold
    for doc_id in set(predictions) | set(golds):
        pred = {_key(p) for p in predictions.get(doc_id, [])}
        gold = {_key(g) for g in golds.get(doc_id, [])}
        for s, e, t in pred:
            counts[t][1] += 1
            if (s, e, t) in gold:
                counts[t][0] += 1
        for s, e, t in gold:
            counts[t][2] += 1
    report = {}
    for t, name in enumerate(labels):
        tp, npred, ngold = counts[t]
        report[name] = _prf(tp, npred, ngold)
    tp = sum(c[0] for c in counts.values())
    npred = sum(c[1] for c in counts.values())
    ngold = sum(c[2] for c in counts.values())
    report["micro"] = _prf(tp, npred, ngold)
    return report


def _key(span) -> tuple[int, int, int]:
    if isinstance(span, SpanPrediction):
        return (span.start, span.end, span.type_id)
    if isinstance(span, Entity):
        return (span.start, span.end, span.type_id)
    s, e, t = span[:3]
    return (int(s), int(e), int(t))


def _prf(tp: int, npred: int, ngold: int) -> tuple[float, float, float]:
    p = tp / npred if npred else 0.0
    r = tp / ngold if ngold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return (p, r, f1)


def gold_spans(doc: Document) -> list[tuple[int, int, int]]:
    return [(e.start, e.end, e.type_id) for e in doc.entities]
