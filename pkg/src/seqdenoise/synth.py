"""Synthetic weak-supervision corpus generator.

Gold label sequences come from a BIO-valid ground-truth Markov chain; each
token's embedding is its label-class centroid plus perturbations keyed by the
neighboring gold labels plus Gaussian noise, so embeddings carry signal a
constant-parameter HMM cannot exploit. Each labeling source corrupts the gold
spans through a calibrated noise channel: spans are dropped (recall), type-
confused (confusion bias), and spurious spans are hallucinated on O regions
(precision). Context-dependent channels concentrate their misses on spans in
a "blind" neighborhood (preceding gold label O, or non-O), rebalancing the
keep rates so the configured recall still holds exactly in expectation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from seqdenoise.data import (Corpus, EmbeddingSequence, Record, Sentence,
                             WeakObservationTensor, save_corpus, write_embeddings)
from seqdenoise.labels import (EntitySet, EntitySpan, LabelSet, build_label_set,
                               labels_to_spans, spans_to_labels)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SourceChannel:
    """Calibrated per-source noise: emitted-span precision and entity recall.

    Context dependence makes the error rates functions of the neighboring
    gold labels: misses concentrate on spans in the blind neighborhood, and
    hallucinations can be pinned to windows that follow an entity token.
    """

    name: str
    precision: float
    recall: float
    confusion: float = 0.0
    truncate: float = 0.0              # clip a kept multi-token span to a prefix
    jitter: float = 0.0                # shift one boundary of a kept span by 1
    context_dependent: bool = False
    context_delta: float = 0.0
    blind_after_entity: bool = False   # blind context: preceding gold label non-O
    halluc_after_entity: bool = False  # hallucinate only right after an entity

    def __post_init__(self) -> None:
        if not 0.0 < self.precision <= 1.0:
            raise SynthError(f"source {self.name!r}: precision must be in (0, 1]")
        if not 0.0 <= self.recall <= 1.0:
            raise SynthError(f"source {self.name!r}: recall must be in [0, 1]")
        if not 0.0 <= self.confusion < 1.0:
            raise SynthError(f"source {self.name!r}: confusion must be in [0, 1)")
        if not 0.0 <= self.truncate < 1.0:
            raise SynthError(f"source {self.name!r}: truncate must be in [0, 1)")
        if not 0.0 <= self.jitter < 1.0:
            raise SynthError(f"source {self.name!r}: jitter must be in [0, 1)")
        if self.context_dependent and not 0.0 <= self.context_delta <= 1.0:
            raise SynthError(f"source {self.name!r}: context_delta out of range")


@dataclass
class SynthConfig:
    seed: int
    entity_types: tuple[str, ...] = ("PER", "LOC", "ORG")
    n_train: int = 2000
    n_dev: int = 400
    n_test: int = 400
    len_min: int = 5
    len_max: int = 18
    p_entity: float = 0.2     # O -> B-*
    p_continue: float = 0.5   # span continues with I-*
    p_adjacent: float = 0.35  # span end -> immediately a new B-*
    sources: tuple[SourceChannel, ...] = ()
    d_emb: int = 32
    context_strength: float = 0.6
    noise_sigma: float = 1.0
    transition: np.ndarray | None = None  # optional explicit chain override

    def __post_init__(self) -> None:
        if self.seed is None:
            raise SynthError("seed is mandatory")
        if not self.sources:
            raise SynthError("need at least one labeling source")
        if not 1 <= self.len_min <= self.len_max:
            raise SynthError("bad sentence-length bounds")
        for p, name in ((self.p_entity, "p_entity"), (self.p_continue, "p_continue"),
                        (self.p_adjacent, "p_adjacent")):
            if not 0.0 < p < 1.0:
                raise SynthError(f"{name} must lie in (0, 1)")

    @property
    def label_set(self) -> LabelSet:
        return build_label_set(EntitySet(tuple(self.entity_types)))


def chain_matrix(config: SynthConfig) -> np.ndarray:
    """BIO-valid ground-truth transition matrix over the label set."""
    if config.transition is not None:
        return np.asarray(config.transition, dtype=float)
    labels = config.label_set
    n_types = len(config.entity_types)
    n_labels = len(labels)
    mat = np.zeros((n_labels, n_labels))
    b_idx = [labels.b_index(t) for t in config.entity_types]
    i_idx = [labels.i_index(t) for t in config.entity_types]
    mat[0, 0] = 1.0 - config.p_entity
    mat[0, b_idx] = config.p_entity / n_types
    exit_mass = 1.0 - config.p_continue
    for b, i in zip(b_idx, i_idx):
        for src in (b, i):
            mat[src, i] = config.p_continue
            mat[src, 0] = exit_mass * (1.0 - config.p_adjacent)
            mat[src, b_idx] = exit_mass * config.p_adjacent / n_types
    return mat


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(stream,)))


def _sample_gold(config: SynthConfig) -> list[list[int]]:
    rng = _rng(config.seed, 0)
    mat = chain_matrix(config)
    n_labels = mat.shape[0]
    total = config.n_train + config.n_dev + config.n_test
    sentences = []
    for _ in range(total):
        length = int(rng.integers(config.len_min, config.len_max + 1))
        seq = []
        state = 0  # pre-sequence O
        for _ in range(length):
            state = int(rng.choice(n_labels, p=mat[state]))
            seq.append(state)
        sentences.append(seq)
    return sentences


def _sample_embeddings(config: SynthConfig, gold: list[list[int]]) -> list[np.ndarray]:
    rng = _rng(config.seed, 1)
    n_labels = 2 * len(config.entity_types) + 1
    centroid = rng.normal(size=(n_labels, config.d_emb))
    prev_sig = rng.normal(size=(n_labels, config.d_emb)) * config.context_strength
    next_sig = rng.normal(size=(n_labels, config.d_emb)) * config.context_strength
    out = []
    for seq in gold:
        padded = [0] + seq + [0]  # virtual O outside the sentence
        rows = (centroid[seq]
                + prev_sig[padded[:-2]]
                + next_sig[padded[2:]]
                + config.noise_sigma * rng.normal(size=(len(seq), config.d_emb)))
        out.append(rows.astype(np.float32))
    return out


def _span_context_blind(span: EntitySpan, seq: list[int], after_entity: bool) -> bool:
    prev_is_o = span.start == 0 or seq[span.start - 1] == 0
    return not prev_is_o if after_entity else prev_is_o


def _keep_rates(channel: SourceChannel, base: float, n_blind: int,
                n_fav: int) -> tuple[float, float]:
    """(q_blind, q_fav) whose span-weighted mean is exactly the base keep rate."""
    if not channel.context_dependent or n_blind == 0 or n_fav == 0 or base == 0:
        return base, base
    delta = min(channel.context_delta, base)
    if base + delta * n_blind / n_fav > 1.0:
        delta = min(delta, (1.0 - base) * n_fav / n_blind)
    return base - delta, base + delta * n_blind / n_fav


def _source_labels(config: SynthConfig, gold: list[list[int]],
                   channel: SourceChannel, stream: int) -> list[list[int]]:
    rng = _rng(config.seed, stream)
    labels = config.label_set
    types = list(config.entity_types)
    gold_spans = [labels_to_spans(seq, labels) for seq in gold]

    n_blind = n_fav = 0
    intact_total = 0.0
    for seq, spans in zip(gold, gold_spans):
        for span in spans:
            if _span_context_blind(span, seq, channel.blind_after_entity):
                n_blind += 1
            else:
                n_fav += 1
            wide = span.end - span.start >= 2
            movable = wide or (span.start >= 1 and seq[span.start - 1] == 0) \
                or (span.end < len(seq) and seq[span.end] == 0)
            intact_total += ((1.0 - channel.confusion)
                             * (1.0 - channel.truncate * wide)
                             * (1.0 - channel.jitter * movable))
    n_spans = n_blind + n_fav
    # keep rate calibrated so that kept-and-undamaged spans hit the recall
    damage = intact_total / n_spans if n_spans else 1.0
    base = channel.recall / damage if channel.recall > 0 else 0.0
    if base > 1.0 + 1e-9:
        raise SynthError(
            f"source {channel.name!r}: recall {channel.recall} unreachable "
            f"given confusion/truncation (max {damage:.3f})")
    base = min(base, 1.0)
    q_blind, q_fav = _keep_rates(channel, base, n_blind, n_fav)
    halluc_rate = channel.recall / channel.precision - base
    if halluc_rate < -1e-9:
        raise SynthError(
            f"source {channel.name!r}: precision {channel.precision} unreachable; "
            f"kept spans are only {damage:.3f} correct")
    halluc_rate = max(0.0, halluc_rate)

    out = []
    for seq, spans in zip(gold, gold_spans):
        emitted: list[EntitySpan] = []
        occupied = np.zeros(len(seq), dtype=bool)
        for span in spans:
            blind = _span_context_blind(span, seq, channel.blind_after_entity)
            if rng.random() >= (q_blind if blind else q_fav):
                continue
            etype = span.type
            if channel.confusion > 0 and rng.random() < channel.confusion:
                others = [t for t in types if t != etype]
                etype = others[int(rng.integers(len(others)))]
            start, end = span.start, span.end
            if channel.truncate > 0 and end - start >= 2 \
                    and rng.random() < channel.truncate:
                end = start + int(rng.integers(1, end - start))
            if channel.jitter > 0 and rng.random() < channel.jitter:
                moves = []
                if end - start >= 2:
                    moves += ["shrink_end", "shrink_start"]
                if end < len(seq) and seq[end] == 0 and not occupied[end]:
                    moves.append("extend_end")
                if start >= 1 and seq[start - 1] == 0 and not occupied[start - 1]:
                    moves.append("extend_start")
                if moves:
                    move = moves[int(rng.integers(len(moves)))]
                    if move == "shrink_end":
                        end -= 1
                    elif move == "shrink_start":
                        start += 1
                    elif move == "extend_end":
                        end += 1
                    else:
                        start -= 1
            emitted.append(EntitySpan(etype, start, end))
            occupied[start:end] = True
        n_halluc = int(rng.poisson(halluc_rate * len(spans))) if halluc_rate > 0 else 0
        gold_o = np.asarray(seq) == 0
        for _ in range(n_halluc):
            for _attempt in range(20):
                width = int(rng.integers(1, 4))
                if width > len(seq):
                    continue
                start = int(rng.integers(0, len(seq) - width + 1))
                if channel.halluc_after_entity and (start == 0 or seq[start - 1] == 0):
                    continue
                window = slice(start, start + width)
                if gold_o[window].all() and not occupied[window].any():
                    etype = types[int(rng.integers(len(types)))]
                    emitted.append(EntitySpan(etype, start, start + width))
                    occupied[window] = True
                    break
        out.append(spans_to_labels(emitted, len(seq), labels))
    return out


def generate(config: SynthConfig) -> Corpus:
    """Deterministic corpus with gold labels, K one-hot sources, embeddings."""
    labels = config.label_set
    gold = _sample_gold(config)
    embeddings = _sample_embeddings(config, gold)
    per_source = [_source_labels(config, gold, ch, 100 + k)
                  for k, ch in enumerate(config.sources)]

    source_names = tuple(ch.name for ch in config.sources)
    if len(set(source_names)) != len(source_names):
        raise SynthError("source names must be unique")
    n_labels = len(labels)
    splits = (["train"] * config.n_train + ["dev"] * config.n_dev
              + ["test"] * config.n_test)
    counters = {"train": 0, "dev": 0, "test": 0}
    records = []
    for idx, (seq, emb) in enumerate(zip(gold, embeddings)):
        split = splits[idx]
        sid = f"{split}-{counters[split]:04d}"
        counters[split] += 1
        length = len(seq)
        values = np.zeros((length, len(source_names), n_labels))
        for k in range(len(source_names)):
            values[np.arange(length), k, per_source[k][idx]] = 1.0
        tokens = tuple(f"tok{labels.name(lab).lower().replace('-', '')}{t}"
                       for t, lab in enumerate(seq))
        records.append(Record(
            sentence=Sentence(sid, tokens, tuple(seq)),
            obs=WeakObservationTensor(values, source_names),
            emb=EmbeddingSequence(emb),
            split=split,
        ))
    return Corpus(labels, source_names, tuple(records))


def reference_channels() -> tuple[SourceChannel, ...]:
    """Heterogeneous channel mix for the canonical benchmark: two precise but
    context-blind dictionaries whose misses concentrate on specific
    neighborhoods, a broad matcher, and two sources that hallucinate spans
    right after real entities, where a constant-parameter chain cannot tell
    them from genuine adjacent mentions."""
    return (
        SourceChannel("dict-precise", precision=0.95, recall=0.40,
                      context_dependent=True, context_delta=0.40),
        SourceChannel("dict-broad", precision=0.80, recall=0.65, confusion=0.10,
                      halluc_after_entity=True),
        SourceChannel("ctx-blind-o", precision=0.90, recall=0.50,
                      context_dependent=True, context_delta=0.50),
        SourceChannel("trap", precision=0.50, recall=0.55, confusion=0.10,
                      halluc_after_entity=True),
    )


def reference_config(seed: int) -> SynthConfig:
    return SynthConfig(seed=seed, sources=reference_channels(),
                       context_strength=1.2, noise_sigma=0.8, p_adjacent=0.45)


def reference_suite(seed: int, out_dir: str | Path | None = None) -> Corpus:
    """The canonical desk-scale benchmark: 3 entity types, K=4 heterogeneous
    context-dependent sources, 2000/400/400 sentences, 32-dim embeddings."""
    corpus = generate(reference_config(seed))
    if out_dir is not None:
        write_bundle(corpus, out_dir)
    return corpus


def write_bundle(corpus: Corpus, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = out / "corpus.jsonl"
    emb_path = out / "embeddings.bin"
    save_corpus(corpus, corpus_path)
    write_embeddings(emb_path, [(r.sentence.id, r.emb.vectors) for r in corpus.records])
    return corpus_path, emb_path


def config_from_json(payload: dict) -> SynthConfig:
    sources = tuple(SourceChannel(**src) for src in payload.pop("sources"))
    payload.pop("transition", None)
    payload["entity_types"] = tuple(payload.get("entity_types", ("PER", "LOC", "ORG")))
    return SynthConfig(sources=sources, **payload)


def config_to_json(config: SynthConfig) -> dict:
    payload = asdict(config)
    payload["entity_types"] = list(config.entity_types)
    payload["sources"] = [asdict(ch) for ch in config.sources]
    payload.pop("transition", None)
    return payload


def load_config(path: str | Path) -> SynthConfig:
    return config_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
