"""Documents, vocabulary, sliding-window segmentation, synthetic corpora.

Tokens are whitespace-level words; entity spans use inclusive 0-based start
and end token indices. Datasets are JSONL, one document per line with
fields ``id``, ``tokens`` and ``entities`` (``start``/``end``/``type``
objects, where ``type`` is a string mapped to a dense id through a sorted
label list).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
RESERVED = (PAD, UNK, CLS, MASK)


class DataError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Entity:
    start: int
    end: int  # inclusive
    type_id: int


@dataclass
class Document:
    id: str
    tokens: list[str]
    entities: list[Entity] = field(default_factory=list)

    def validate(self, n_types: int | None = None) -> None:
        if not self.tokens:
            raise DataError(f"document {self.id!r} has no tokens")
        seen = set()
        for e in self.entities:
            if not (0 <= e.start <= e.end < len(self.tokens)):
                raise DataError(
                    f"document {self.id!r}: entity ({e.start}, {e.end}) out of range for {len(self.tokens)} tokens")
            if e.type_id < 0 or (n_types is not None and e.type_id >= n_types):
                raise DataError(f"document {self.id!r}: entity type id {e.type_id} out of range")
            key = (e.start, e.end, e.type_id)
            if key in seen:
                raise DataError(f"document {self.id!r}: duplicate entity {key}")
            seen.add(key)


@dataclass
class Segment:
    parent_id: str
    origin: int
    tokens: list[str]
    entities: list[Entity] = field(default_factory=list)


class Vocab:
    """Token-to-id map with fixed reserved slots for [PAD]/[UNK]/[CLS]/[MASK]."""

    def __init__(self, tokens: list[str]):
        self._tok2id: dict[str, int] = {}
        for t in RESERVED:
            self._tok2id[t] = len(self._tok2id)
        for t in tokens:
            if t not in self._tok2id:
                self._tok2id[t] = len(self._tok2id)
        self._id2tok = [t for t, _ in sorted(self._tok2id.items(), key=lambda kv: kv[1])]

    def __len__(self) -> int:
        return len(self._tok2id)

    @property
    def pad_id(self) -> int:
        return self._tok2id[PAD]

    @property
    def unk_id(self) -> int:
        return self._tok2id[UNK]

    @property
    def cls_id(self) -> int:
        return self._tok2id[CLS]

    @property
    def mask_id(self) -> int:
        return self._tok2id[MASK]

    def encode(self, tokens: list[str]) -> np.ndarray:
        unk = self.unk_id
        return np.array([self._tok2id.get(t, unk) for t in tokens], dtype=np.int64)

    def token(self, idx: int) -> str:
        return self._id2tok[idx]

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self._id2tok, fh)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path) as fh:
            id2tok = json.load(fh)
        if list(id2tok[:len(RESERVED)]) != list(RESERVED):
            raise DataError(f"vocabulary file {path!r} lacks the reserved token prefix")
        return cls(id2tok[len(RESERVED):])


def build_vocab(docs: list[Document]) -> Vocab:
    seen = sorted({t for d in docs for t in d.tokens})
    return Vocab(seen)


# ---------------------------------------------------------------------------
# JSONL ingestion


def infer_label_set(records: list[dict]) -> list[str]:
    return sorted({e["type"] for r in records for e in r.get("entities", [])})


def load_jsonl(path: str, label_set: list[str] | None = None) -> tuple[list[Document], list[str]]:
    """Parse a JSONL dataset; returns documents plus the (sorted) label list.

    Malformed lines raise with their 1-based line number; out-of-range
    entities raise with the document id.
    """
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed record: {e}") from e
            if not isinstance(rec, dict) or "id" not in rec or "tokens" not in rec:
                raise DataError(f"{path}:{lineno}: record must be an object with id and tokens")
            records.append(rec)
    labels = sorted(label_set) if label_set is not None else infer_label_set(records)
    type_ids = {t: i for i, t in enumerate(labels)}
    docs = []
    for rec in records:
        ents = []
        for e in rec.get("entities", []):
            t = e.get("type")
            if t not in type_ids:
                raise DataError(f"document {rec['id']!r}: unknown entity type {t!r}")
            ents.append(Entity(int(e["start"]), int(e["end"]), type_ids[t]))
        doc = Document(id=str(rec["id"]), tokens=list(rec["tokens"]), entities=ents)
        doc.validate(n_types=len(labels))
        docs.append(doc)
    return docs, labels


def save_jsonl(path: str, docs: list[Document], labels: list[str]) -> None:
    with open(path, "w") as fh:
        for d in docs:
            rec = {
                "id": d.id,
                "tokens": d.tokens,
                "entities": [{"start": e.start, "end": e.end, "type": labels[e.type_id]}
                             for e in d.entities],
            }
            fh.write(json.dumps(rec) + "\n")


def save_labels(path: str, labels: list[str]) -> None:
    with open(path, "w") as fh:
        json.dump(labels, fh)


def load_labels(path: str) -> list[str]:
    with open(path) as fh:
        return list(json.load(fh))


# ---------------------------------------------------------------------------
# sliding-window segmentation


def segment(doc: Document, max_len: int, stride: int) -> list[Segment]:
    """Split into windows starting at 0, stride, 2*stride, ...

    Entities crossing a window boundary are dropped from that window; they
    survive in any window that contains them fully.
    """
    if not 1 <= stride <= max_len:
        raise DataError(f"stride must satisfy 1 <= stride <= max_len, got {stride} / {max_len}")
    n = len(doc.tokens)
    out = []
    for start in range(0, n, stride):
        stop = min(start + max_len, n)
        ents = [Entity(e.start - start, e.end - start, e.type_id)
                for e in doc.entities if e.start >= start and e.end < stop]
        out.append(Segment(parent_id=doc.id, origin=start,
                           tokens=doc.tokens[start:stop], entities=ents))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus generator


@dataclass(frozen=True)
class SynthType:
    name: str
    min_len: int
    max_len: int
    density: float  # target fraction of document tokens devoted to this type

    @property
    def open_marker(self) -> str:
        return f"<{self.name}>"

    @property
    def close_marker(self) -> str:
        return f"</{self.name}>"


@dataclass(frozen=True)
class SynthSpec:
    types: tuple[SynthType, ...] = ()
    filler_vocab: int = 50

    def label_names(self) -> list[str]:
        return sorted(t.name for t in self.types)


def default_synth_spec() -> SynthSpec:
    """Two entity types: a frequent short one and a rare 20-to-60-token one."""
    return SynthSpec(types=(
        SynthType("short", 1, 4, 0.12),
        SynthType("long", 20, 60, 0.04),
    ))


_MAX_PLACE_TRIES = 200


def _place_entities(rng: np.random.Generator, doc_len: int, spec: SynthSpec,
                    type_ids: dict[str, int]) -> list[tuple[int, int, int]]:
    """Choose non-overlapping (start, length, type_id) marker footprints."""
    occupied: list[tuple[int, int]] = []  # half-open intervals, unsorted
    placed = []
    for st in spec.types:
        mean_foot = (st.min_len + st.max_len) / 2.0 + 2.0
        target = int(round(st.density * doc_len / mean_foot))
        for _ in range(target):
            length = int(rng.integers(st.min_len, st.max_len + 1))
            foot = length + 2
            if foot > doc_len:
                raise DataError(f"synthetic type {st.name!r} cannot fit in doc_len {doc_len}")
            for _try in range(_MAX_PLACE_TRIES):
                s = int(rng.integers(0, doc_len - foot + 1))
                if all(s + foot <= a or s >= b for a, b in occupied):
                    occupied.append((s, s + foot))
                    placed.append((s, length, type_ids[st.name]))
                    break
            else:
                raise DataError(
                    f"failed to place a {st.name!r} span after {_MAX_PLACE_TRIES} attempts (doc too dense)")
    return placed


def gen_synthetic(n_docs: int, doc_len: int, seed: int, spec: SynthSpec) -> list[Document]:
    """Deterministic filler documents with marker-delimited entity spans.

    Each planted span occupies ``<type> w ... w </type>``; the gold span
    covers the tokens strictly inside the markers. Overlapping placements
    are resampled; persistent failure raises.
    """
    rng = np.random.default_rng(seed)
    names = sorted(t.name for t in spec.types)
    type_ids = {n: i for i, n in enumerate(names)}
    by_name = {t.name: t for t in spec.types}
    docs = []
    for di in range(n_docs):
        fillers = rng.integers(0, spec.filler_vocab, size=doc_len)
        tokens = [f"w{int(v):03d}" for v in fillers]
        entities = []
        for s, length, tid in _place_entities(rng, doc_len, spec, type_ids):
            st = by_name[names[tid]]
            tokens[s] = st.open_marker
            tokens[s + length + 1] = st.close_marker
            entities.append(Entity(s + 1, s + length, tid))
        doc = Document(id=f"synth-{di:04d}", tokens=tokens, entities=sorted(entities))
        doc.validate(n_types=len(names))
        docs.append(doc)
    return docs
