"""Corpus model and file formats.

Corpus file: line-delimited JSON. The first record is a header carrying the
label set and the source order; every following record is one sentence:

    {"label_set": [...], "sources": [...]}
    {"id": ..., "split": "train", "tokens": [...],
     "weak_labels": {source: [label names] | [prob vectors]},
     "gold": [label names]}          # gold optional

Hard labels (a single label name per token) are converted to one-hot rows on
load. Embedding file: binary, magic ``SDEMB1``, little-endian u32 d_emb, then
per sentence: u32 id length, id bytes, u32 T, T * d_emb float32 row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from seqdenoise.labels import LabelSet, labels_to_spans

EMB_MAGIC = b"SDEMB1"
ROW_SUM_TOL = 1e-6
SPLITS = ("train", "dev", "test")


class CorpusError(ValueError):
    """Malformed corpus or embedding file, or misaligned contents."""


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[str, ...]
    gold: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.tokens) < 1:
            raise CorpusError(f"sentence {self.id!r}: empty token list")
        if self.gold is not None and len(self.gold) != len(self.tokens):
            raise CorpusError(
                f"sentence {self.id!r}: gold length {len(self.gold)} != "
                f"token count {len(self.tokens)}"
            )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class WeakObservationTensor:
    """Per-token, per-source probability rows over the label set (T, K, L)."""

    values: np.ndarray
    source_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise CorpusError("observation tensor must be (T, K, L)")
        if self.values.shape[1] != len(self.source_names) or not self.source_names:
            raise CorpusError("source-name count must match tensor axis K >= 1")
        if np.any(self.values < 0):
            raise CorpusError("observation tensor has negative entries")
        sums = self.values.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            raise CorpusError("observation rows must sum to 1")

    @property
    def n_sources(self) -> int:
        return len(self.source_names)


@dataclass(frozen=True)
class EmbeddingSequence:
    vectors: np.ndarray  # (T, d_emb) float32

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 1:
            raise CorpusError("embedding matrix must be (T, d_emb), d_emb >= 1")

    @property
    def d_emb(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class Record:
    """One sentence with its aligned observations and optional embeddings."""

    sentence: Sentence
    obs: WeakObservationTensor
    emb: EmbeddingSequence | None
    split: str

    def __post_init__(self) -> None:
        t = len(self.sentence)
        if self.obs.values.shape[0] != t:
            raise CorpusError(
                f"sentence {self.sentence.id!r}: observation rows "
                f"{self.obs.values.shape[0]} != token count {t}"
            )
        if self.emb is not None and self.emb.vectors.shape[0] != t:
            raise CorpusError(
                f"sentence {self.sentence.id!r}: embedding rows "
                f"{self.emb.vectors.shape[0]} != token count {t}"
            )
        if self.split not in SPLITS:
            raise CorpusError(f"sentence {self.sentence.id!r}: bad split {self.split!r}")


@dataclass(frozen=True)
class Corpus:
    label_set: LabelSet
    source_names: tuple[str, ...]
    records: tuple[Record, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.sentence.id in seen:
                raise CorpusError(f"duplicate sentence id {rec.sentence.id!r}")
            seen.add(rec.sentence.id)
            if rec.obs.source_names != self.source_names:
                raise CorpusError(
                    f"sentence {rec.sentence.id!r}: source names differ from header"
                )
            if rec.obs.values.shape[2] != len(self.label_set):
                raise CorpusError(
                    f"sentence {rec.sentence.id!r}: label axis "
                    f"{rec.obs.values.shape[2]} != |L| {len(self.label_set)}"
                )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_sources(self) -> int:
        return len(self.source_names)

    @property
    def d_emb(self) -> int | None:
        for rec in self.records:
            if rec.emb is not None:
                return rec.emb.d_emb
        return None

    def split(self, tag: str) -> "Corpus":
        if tag not in SPLITS:
            raise CorpusError(f"unknown split {tag!r}")
        recs = tuple(r for r in self.records if r.split == tag)
        return Corpus(self.label_set, self.source_names, recs)

    def with_observations(self, tensors: dict[str, np.ndarray],
                          source_names: tuple[str, ...] | None = None) -> "Corpus":
        """Corpus with per-sentence observation tensors replaced (e.g. after
        sparsity adjustment or source appending); everything else shared."""
        names = source_names if source_names is not None else self.source_names
        recs = []
        for rec in self.records:
            values = tensors[rec.sentence.id]
            recs.append(replace(rec, obs=WeakObservationTensor(values, names)))
        return Corpus(self.label_set, names, tuple(recs))

    def require_embeddings(self) -> None:
        missing = [r.sentence.id for r in self.records if r.emb is None]
        if missing:
            raise CorpusError(f"embeddings missing for sentences: {missing[:5]}")


def _row_from_json(entry, label_set: LabelSet, sid: str):
    """One token's annotation: a label name (one-hot) or a probability row."""
    n = len(label_set)
    if isinstance(entry, str):
        row = np.zeros(n)
        row[label_set.index(entry)] = 1.0
        return row
    row = np.asarray(entry, dtype=float)
    if row.shape != (n,):
        raise CorpusError(f"sentence {sid!r}: probability row has wrong length")
    return row


def _row_to_json(row: np.ndarray, label_set: LabelSet):
    hot = np.nonzero(row == 1.0)[0]
    if len(hot) == 1 and row.sum() == 1.0:
        return label_set.name(int(hot[0]))
    return [float(v) for v in row]


def load_corpus(corpus_path: str | Path, embedding_path: str | Path | None = None) -> Corpus:
    """Read a corpus file and, optionally, its aligned embedding file."""
    corpus_path = Path(corpus_path)
    with corpus_path.open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise CorpusError(f"{corpus_path}: empty corpus file")

    header = json.loads(lines[0])
    try:
        label_set = LabelSet(tuple(header["label_set"]))
        source_names = tuple(header["sources"])
    except KeyError as exc:
        raise CorpusError(f"{corpus_path}: header missing field {exc}") from None

    embeddings = read_embeddings(embedding_path) if embedding_path is not None else {}

    records = []
    for line in lines[1:]:
        raw = json.loads(line)
        sid = raw.get("id")
        if not isinstance(sid, str) or not sid:
            raise CorpusError(f"{corpus_path}: record without a string id")
        tokens = tuple(raw["tokens"])
        gold = None
        if raw.get("gold") is not None:
            if len(raw["gold"]) != len(tokens):
                raise CorpusError(f"sentence {sid!r}: gold/token length mismatch")
            gold = tuple(label_set.index(name) for name in raw["gold"])
        sentence = Sentence(sid, tokens, gold)

        weak = raw["weak_labels"]
        if set(weak) != set(source_names):
            raise CorpusError(f"sentence {sid!r}: sources differ from header")
        values = np.zeros((len(tokens), len(source_names), len(label_set)))
        for k, src in enumerate(source_names):
            rows = weak[src]
            if len(rows) != len(tokens):
                raise CorpusError(f"sentence {sid!r}: source {src!r} length mismatch")
            for t, entry in enumerate(rows):
                values[t, k] = _row_from_json(entry, label_set, sid)
        obs = WeakObservationTensor(values, source_names)

        emb = None
        if embedding_path is not None:
            if sid not in embeddings:
                raise CorpusError(f"sentence {sid!r}: no embeddings in file")
            emb = EmbeddingSequence(embeddings[sid])

        records.append(Record(sentence, obs, emb, raw.get("split", "train")))

    return Corpus(label_set, source_names, tuple(records))


def save_corpus(corpus: Corpus, corpus_path: str | Path) -> None:
    """Write the corpus file; exact one-hot rows serialize back to label names."""
    corpus_path = Path(corpus_path)
    label_set = corpus.label_set
    with corpus_path.open("w", encoding="utf-8") as fh:
        header = {"label_set": list(label_set.labels), "sources": list(corpus.source_names)}
        fh.write(json.dumps(header) + "\n")
        for rec in corpus.records:
            weak = {
                src: [_row_to_json(rec.obs.values[t, k], label_set)
                      for t in range(len(rec.sentence))]
                for k, src in enumerate(corpus.source_names)
            }
            out = {
                "id": rec.sentence.id,
                "split": rec.split,
                "tokens": list(rec.sentence.tokens),
                "weak_labels": weak,
            }
            if rec.sentence.gold is not None:
                out["gold"] = [label_set.name(i) for i in rec.sentence.gold]
            fh.write(json.dumps(out) + "\n")


def read_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Parse the binary embedding file into id -> (T, d_emb) float32 arrays."""
    data = Path(path).read_bytes()
    if data[: len(EMB_MAGIC)] != EMB_MAGIC:
        raise CorpusError(f"{path}: bad embedding-file magic")
    off = len(EMB_MAGIC)
    (d_emb,) = struct.unpack_from("<I", data, off)
    off += 4
    if d_emb < 1:
        raise CorpusError(f"{path}: nonpositive embedding dimension")
    out: dict[str, np.ndarray] = {}
    while off < len(data):
        (id_len,) = struct.unpack_from("<I", data, off)
        off += 4
        sid = data[off : off + id_len].decode("utf-8")
        off += id_len
        (t_len,) = struct.unpack_from("<I", data, off)
        off += 4
        count = t_len * d_emb
        vecs = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        if vecs.size != count:
            raise CorpusError(f"{path}: truncated embedding payload for {sid!r}")
        off += 4 * count
        out[sid] = vecs.reshape(t_len, d_emb).copy()
    return out


def write_embeddings(path: str | Path, embeddings: dict[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> None:
    items = embeddings.items() if isinstance(embeddings, dict) else embeddings
    items = list(items)
    if not items:
        raise CorpusError("nothing to write")
    d_emb = int(items[0][1].shape[1])
    with Path(path).open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<I", d_emb))
        for sid, vecs in items:
            if vecs.ndim != 2 or vecs.shape[1] != d_emb:
                raise CorpusError(f"sentence {sid!r}: embedding dim != {d_emb}")
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", vecs.shape[0]))
            fh.write(np.ascontiguousarray(vecs, dtype="<f4").tobytes())


def _cut_points(sentence: Sentence, max_len: int, label_set: LabelSet) -> list[int]:
    """Segment boundaries, never splitting inside a gold entity span."""
    t_total = len(sentence)
    inside = np.zeros(t_total + 1, dtype=bool)  # True: position sits inside a span
    if sentence.gold is not None:
        for span in labels_to_spans(list(sentence.gold), label_set):
            if span.end - span.start > max_len:
                raise CorpusError(
                    f"sentence {sentence.id!r}: gold span of length "
                    f"{span.end - span.start} exceeds max_len {max_len}"
                )
            inside[span.start + 1 : span.end] = True
    cuts = [0]
    while cuts[-1] < t_total:
        pos = min(cuts[-1] + max_len, t_total)
        while inside[pos]:
            pos -= 1
        if pos <= cuts[-1]:
            raise CorpusError(
                f"sentence {sentence.id!r}: cannot place a cut within max_len "
                f"{max_len} without splitting a gold span"
            )
        cuts.append(pos)
    return cuts


def segment_long(record: Record, max_len: int, label_set: LabelSet) -> list[Record]:
    """Split one record into segments of at most max_len tokens.

    Concatenating the pieces reproduces the original token, observation, and
    embedding sequences; ids get deterministic ``#i`` suffixes.
    """
    if max_len < 1:
        raise CorpusError("max_len must be >= 1")
    if len(record.sentence) <= max_len:
        return [record]
    cuts = _cut_points(record.sentence, max_len, label_set)
    pieces = []
    for i, (lo, hi) in enumerate(zip(cuts[:-1], cuts[1:])):
        sent = Sentence(
            f"{record.sentence.id}#{i}",
            record.sentence.tokens[lo:hi],
            record.sentence.gold[lo:hi] if record.sentence.gold is not None else None,
        )
        obs = WeakObservationTensor(record.obs.values[lo:hi].copy(), record.obs.source_names)
        emb = None
        if record.emb is not None:
            emb = EmbeddingSequence(record.emb.vectors[lo:hi].copy())
        pieces.append(Record(sent, obs, emb, record.split))
    return pieces


def segment_corpus(corpus: Corpus, max_len: int) -> Corpus:
    recs: list[Record] = []
    for rec in corpus.records:
        recs.extend(segment_long(rec, max_len, corpus.label_set))
    return Corpus(corpus.label_set, corpus.source_names, tuple(recs))
