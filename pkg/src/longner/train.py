"""Training loop, prediction, and evaluation over documents.

Gradients are accumulated per batch by scaling each segment's loss by 1/B
and running backward segment by segment, so no padding is ever needed; the
optimizer sees the batch-mean gradient. Runs are deterministic under the
configured seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig, config_to_dict
from .data import Document, Segment, Vocab, build_vocab, save_labels, segment
from .decoding import SpanPrediction, extract, gold_spans, micro_prf, resolve_conflicts, stitch, symmetrize
from .model import SpanModel, build_labels
from .optim import AdamW, save_params


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: SpanModel
    vocab: Vocab
    labels: list[str]
    history: list[dict] = field(default_factory=list)
    best_f1: float = 0.0
    best_step: int = 0


def _word_spans(n_content: int) -> list[tuple[int, int]]:
    # whitespace tokens are single-token words; positions shift by 1 for [CLS]
    return [(p, p) for p in range(1, n_content + 1)]


def segment_ids(seg: Segment, vocab: Vocab) -> np.ndarray:
    return np.concatenate([[vocab.cls_id], vocab.encode(seg.tokens)])


def predict_segment(model: SpanModel, seg: Segment, vocab: Vocab,
                    threshold: float = 0.0) -> list[SpanPrediction]:
    with T.no_grad():
        logits, _ = model.forward_scores(segment_ids(seg, vocab))
    sym, valid = symmetrize(logits.data, model.m)
    return resolve_conflicts(extract(sym, valid, threshold))


def predict_document(model: SpanModel, doc: Document, vocab: Vocab, cfg: RunConfig) -> list[SpanPrediction]:
    max_content = min(cfg.data.max_seg_len, cfg.encoder.max_len - 1)
    segs = segment(doc, max_content, min(cfg.data.stride, max_content))
    per_seg = [predict_segment(model, s, vocab, cfg.decode.threshold) for s in segs]
    return stitch(per_seg, segs, len(doc.tokens))


def evaluate(model: SpanModel, docs: list[Document], vocab: Vocab,
             cfg: RunConfig) -> tuple[float, float, float]:
    preds = {d.id: predict_document(model, d, vocab, cfg) for d in docs}
    golds = {d.id: gold_spans(d) for d in docs}
    return micro_prf(preds, golds)


def train(train_docs: list[Document], dev_docs: list[Document], cfg: RunConfig,
          labels: list[str], out_dir: str | None = None,
          log=None) -> TrainResult:
    """Train on segmented documents; keep the best-dev-F1 checkpoint.

    History records one line per optimizer step (loss) and one per eval
    (dev P/R/F1); it is written as JSONL when ``out_dir`` is given.
    """
    if not train_docs:
        raise TrainingError("empty training set")
    cfg.validate()
    T.set_default_dtype(cfg.train.dtype)
    vocab = build_vocab(train_docs)
    model = SpanModel(cfg, len(vocab), vocab.cls_id, len(labels))
    rng = np.random.default_rng(cfg.train.seed)

    max_content = min(cfg.data.max_seg_len, cfg.encoder.max_len - 1)
    stride = min(cfg.data.stride, max_content)
    segs = [s for d in train_docs for s in segment(d, max_content, stride) if s.tokens]
    label_bands = [build_labels(s, model.m, len(labels)) for s in segs]
    dropped = sum(lb.dropped_count for lb in label_bands)
    if dropped and log:
        log(f"note: {dropped} gold spans exceed the band (length > {model.m + 1}) and are unsupervised")

    opt = AdamW(model.params(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    result = TrainResult(model=model, vocab=vocab, labels=list(labels))
    best_snapshot: dict[str, np.ndarray] | None = None
    step = 0
    stop = False

    def run_eval() -> None:
        nonlocal best_snapshot, stop
        if not dev_docs:
            return
        p, r, f1 = evaluate(model, dev_docs, vocab, cfg)
        result.history.append({"step": step, "dev_p": p, "dev_r": r, "dev_f1": f1})
        if log:
            log(f"step {step}: dev P={p:.4f} R={r:.4f} F1={f1:.4f}")
        if f1 > result.best_f1 or best_snapshot is None:
            result.best_f1 = f1
            result.best_step = step
            best_snapshot = {n: t.data.copy() for n, t in model.params().items()}
        if cfg.train.stop_f1 and f1 >= cfg.train.stop_f1:
            stop = True

    B = cfg.train.batch_size
    for epoch in range(cfg.train.epochs):
        order = rng.permutation(len(segs))
        for pos in range(0, len(order), B):
            batch = order[pos:pos + B]
            opt.zero_grad()
            batch_loss = 0.0
            for si in batch:
                seg = segs[int(si)]
                ids = segment_ids(seg, vocab)
                if cfg.encoder.mask_prob > 0.0:
                    ids, _ = _corrupt(ids, cfg.encoder.mask_prob, rng, vocab.mask_id)
                logits, _ = model.forward_scores(ids, train=True)
                loss = model.loss(logits, label_bands[int(si)])
                val = loss.item()
                if not np.isfinite(val):
                    raise TrainingError(
                        f"non-finite loss at step {step}, segment {seg.parent_id}@{seg.origin}")
                batch_loss += val
                T.mul_scalar(loss, 1.0 / len(batch)).backward()
            opt.step()
            step += 1
            result.history.append({"step": step, "epoch": epoch, "loss": batch_loss / len(batch)})
            if cfg.train.eval_every and step % cfg.train.eval_every == 0:
                run_eval()
            if stop or (cfg.train.max_steps and step >= cfg.train.max_steps):
                stop = True
                break
        if not stop and not cfg.train.eval_every:
            run_eval()
        if stop:
            break
    if not any("dev_f1" in h for h in result.history):
        run_eval()

    if best_snapshot is not None:
        for name, tensor in model.params().items():
            tensor.data = best_snapshot[name]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_params(out_dir, model.params())
        vocab.save(os.path.join(out_dir, "vocab.json"))
        save_labels(os.path.join(out_dir, "labels.json"), labels)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(config_to_dict(cfg), fh, indent=1)
        with open(os.path.join(out_dir, "history.jsonl"), "w") as fh:
            for rec in result.history:
                fh.write(json.dumps(rec) + "\n")
    return result


def _corrupt(ids: np.ndarray, mask_prob: float, rng: np.random.Generator,
             mask_id: int) -> tuple[np.ndarray, list[int]]:
    from .encoder import apply_wwm
    return apply_wwm(ids, _word_spans(ids.shape[0] - 1), mask_prob, rng, mask_id)


def load_model(ckpt_dir: str, cfg: RunConfig) -> tuple[SpanModel, Vocab, list[str]]:
    from .data import load_labels
    from .optim import load_into
    T.set_default_dtype(cfg.train.dtype)
    vocab = Vocab.load(os.path.join(ckpt_dir, "vocab.json"))
    labels = load_labels(os.path.join(ckpt_dir, "labels.json"))
    model = SpanModel(cfg, len(vocab), vocab.cls_id, len(labels))
    load_into(model.params(), ckpt_dir)
    return model, vocab, labels
