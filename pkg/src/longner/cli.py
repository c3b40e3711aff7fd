"""Command-line interface: train, predict, eval, gen-synth, bench.

Every command is deterministic given its config and seed. Config values can
be overridden by LONGNER_<SECTION>_<KEY> environment variables and by
flags (flags win). Exit codes: 0 success, 2 configuration error, 3 data
error.
"""

from __future__ import annotations

import argparse
import json
import sys

import yaml

from .config import ConfigError, load_config
from .data import (DataError, SynthSpec, SynthType, gen_synthetic, load_jsonl,
                   save_jsonl)
from .decoding import gold_spans, prf_report


def _cmd_train(args) -> int:
    from .train import train
    cfg = load_config(args.config, overrides={"train.seed": args.seed})
    train_docs, labels = load_jsonl(args.train)
    dev_docs, _ = load_jsonl(args.dev, label_set=labels) if args.dev else ([], None)
    result = train(train_docs, dev_docs, cfg, labels, out_dir=args.out, log=print)
    print(f"best dev F1 {result.best_f1:.4f} at step {result.best_step}; checkpoint in {args.out}")
    return 0


def _cmd_predict(args) -> int:
    from .train import load_model, predict_document
    cfg = load_config(args.config, overrides={"train.seed": args.seed})
    model, vocab, labels = load_model(args.checkpoint, cfg)
    docs, _ = load_jsonl(args.input, label_set=labels)
    with open(args.out, "w") as fh:
        for doc in docs:
            for p in predict_document(model, doc, vocab, cfg):
                rec = {"doc_id": doc.id, "start": p.start, "end": p.end,
                       "type": labels[p.type_id], "score": round(p.score, 6)}
                fh.write(json.dumps(rec) + "\n")
    print(f"wrote predictions for {len(docs)} documents to {args.out}")
    return 0


def _read_predictions(path: str) -> list[dict]:
    preds = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed prediction: {e}") from e
            for k in ("doc_id", "start", "end", "type"):
                if k not in rec:
                    raise DataError(f"{path}:{lineno}: prediction missing field {k!r}")
            preds.append(rec)
    return preds


def _cmd_eval(args) -> int:
    gold_docs, gold_labels = load_jsonl(args.gold)
    pred_recs = _read_predictions(args.pred)
    labels = sorted(set(gold_labels) | {r["type"] for r in pred_recs})
    type_ids = {t: i for i, t in enumerate(labels)}
    remap = {gt: type_ids[gt] for gt in gold_labels}
    preds: dict[str, list] = {}
    for r in pred_recs:
        preds.setdefault(r["doc_id"], []).append((int(r["start"]), int(r["end"]), type_ids[r["type"]]))
    golds = {d.id: [(s, e, remap[gold_labels[t]]) for s, e, t in gold_spans(d)] for d in gold_docs}
    report = prf_report(preds, golds, labels)
    width = max(len(n) for n in report)
    print(f"{'type':<{width}}  {'P':>8} {'R':>8} {'F1':>8}")
    for name, (p, r, f1) in report.items():
        print(f"{name:<{width}}  {p:>8.4f} {r:>8.4f} {f1:>8.4f}")
    return 0


def _cmd_gen_synth(args) -> int:
    raw = {}
    if args.spec:
        with open(args.spec) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as e:
                mark = getattr(e, "problem_mark", None)
                line = f" at line {mark.line + 1}" if mark is not None else ""
                raise ConfigError(f"generator spec parse error{line}: {e}") from e
    known = {"n_docs", "doc_len", "seed", "filler_vocab", "types"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown generator spec key(s): {sorted(unknown)}")
    types = []
    for t in raw.get("types", []):
        tkeys = set(t) - {"name", "min_len", "max_len", "density"}
        if tkeys:
            raise ConfigError(f"unknown entity-type key(s): {sorted(tkeys)}")
        types.append(SynthType(t["name"], int(t["min_len"]), int(t["max_len"]), float(t["density"])))
    spec = SynthSpec(types=tuple(types), filler_vocab=int(raw.get("filler_vocab", 50)))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 42))
    n_docs = args.n_docs if args.n_docs is not None else int(raw.get("n_docs", 10))
    doc_len = args.doc_len if args.doc_len is not None else int(raw.get("doc_len", 512))
    docs = gen_synthetic(n_docs, doc_len, seed, spec)
    save_jsonl(args.out, docs, spec.label_names())
    print(f"wrote {len(docs)} documents of length {doc_len} to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    from .oracles import bench, format_bench_table
    cfg = load_config(args.config, overrides={"train.seed": args.seed})
    lengths = [int(x) for x in args.lengths.split(",") if x]
    if not lengths:
        raise ConfigError("--lengths must list at least one length")
    records = bench(lengths, w=cfg.encoder.window, m=cfg.span.band_halfwidth,
                    seed=cfg.train.seed, dense_cap=cfg.decode.oracle_max_len)
    table = format_bench_table(records)
    print(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longner",
        description="Span-based named entity recognition for long texts "
                    "with banded attention throughout.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and keep the best-dev checkpoint")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--train", required=True, help="training documents (JSONL)")
    p.add_argument("--dev", help="development documents for model selection (JSONL)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and history")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="decode entity spans from documents")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory from train")
    p.add_argument("--input", required=True, help="documents to decode (JSONL)")
    p.add_argument("--out", required=True, help="output predictions (JSONL)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="micro and per-type P/R/F1 of predictions vs gold")
    p.add_argument("--pred", required=True, help="predictions (JSONL from predict)")
    p.add_argument("--gold", required=True, help="gold documents (JSONL)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gen-synth", help="generate a synthetic long-NER corpus")
    p.add_argument("--spec", help="YAML generator spec (types, lengths, densities)")
    p.add_argument("--out", required=True, help="output corpus (JSONL)")
    p.add_argument("--seed", type=int, help="random seed (overrides spec)")
    p.add_argument("--n-docs", type=int, help="number of documents (overrides spec)")
    p.add_argument("--doc-len", type=int, help="tokens per document (overrides spec)")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("bench", help="banded vs uncompressed scaling measurements")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--lengths", required=True, help="comma-separated input lengths")
    p.add_argument("--out", help="also write the table to this file")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
